//! Time-stamped snapshots of a run and their CSV/JSON serialization.

use std::io::Write;
use std::path::Path;

use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::model::{Model, ParticleEnsemble};

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub step: u64,
    pub time: f64,
    pub loss: f64,
    pub predictor: Vec<f64>,
    /// Positions of the tracked particles, concatenated.
    pub tracked: Vec<f64>,
    pub ensemble: Option<ParticleEnsemble>,
}

impl Snapshot {
    pub fn tracked_particle(&self, k: usize, dim: usize) -> &[f64] {
        &self.tracked[k * dim..(k + 1) * dim]
    }
}

/// What to keep while a simulation runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Recorder {
    /// Record every `stride` steps (step-indexed runs).
    pub stride: u64,
    /// Record on the grid `j * time_grid` (time-indexed runs).
    pub time_grid: Option<f64>,
    /// Track the first `tracked` particles.
    pub tracked: usize,
    /// Store full ensembles in every snapshot.
    pub keep_ensembles: bool,
}

impl Default for Recorder {
    fn default() -> Self {
        Self {
            stride: 10,
            time_grid: None,
            tracked: 0,
            keep_ensembles: false,
        }
    }
}

impl Recorder {
    pub fn every_step(tracked: usize) -> Self {
        Self {
            stride: 1,
            tracked,
            ..Self::default()
        }
    }

    pub fn with_stride(stride: u64, tracked: usize) -> Self {
        Self {
            stride: stride.max(1),
            tracked,
            ..Self::default()
        }
    }

    pub fn on_time_grid(spacing: f64, tracked: usize) -> Self {
        Self {
            stride: 1,
            time_grid: Some(spacing),
            tracked,
            ..Self::default()
        }
    }

    pub fn keeping_ensembles(self) -> Self {
        Self {
            keep_ensembles: true,
            ..self
        }
    }

    pub fn records_step(&self, step: u64, last: u64) -> bool {
        step.is_multiple_of(self.stride.max(1)) || step == last
    }

    pub fn start(&self, model: &Model, ens: &ParticleEnsemble) -> TrajectoryRecord {
        let tracked = self.tracked.min(ens.len());
        TrajectoryRecord {
            param_dim: model.param_dim(),
            samples: model.samples(),
            tracked_ids: (0..tracked).collect(),
            snapshots: Vec::new(),
            meta: Map::new(),
        }
    }

    pub fn snapshot(
        &self,
        model: &Model,
        ens: &ParticleEnsemble,
        step: u64,
        time: f64,
    ) -> Result<Snapshot> {
        let predictor = model.predictor(ens)?;
        let loss = model.residual_of(&predictor).loss();
        Ok(self.snapshot_with(ens, step, time, predictor, loss))
    }

    /// Snapshot when the predictor is already known.
    pub fn snapshot_with(
        &self,
        ens: &ParticleEnsemble,
        step: u64,
        time: f64,
        predictor: Vec<f64>,
        loss: f64,
    ) -> Snapshot {
        let tracked = self.tracked.min(ens.len());
        Snapshot {
            step,
            time,
            loss,
            predictor,
            tracked: ens.as_flat()[..tracked * ens.dim()].to_vec(),
            ensemble: self.keep_ensembles.then(|| ens.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub param_dim: usize,
    pub samples: usize,
    pub tracked_ids: Vec<usize>,
    pub snapshots: Vec<Snapshot>,
    /// Free-form config echo written to the JSON sidecar.
    pub meta: Map<String, Value>,
}

impl TrajectoryRecord {
    pub fn push(&mut self, snap: Snapshot) {
        self.snapshots.push(snap);
    }

    pub fn last(&self) -> Option<&Snapshot> {
        self.snapshots.last()
    }

    pub fn times(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.time).collect()
    }

    pub fn set_meta(&mut self, key: &str, value: impl Serialize) {
        if let Ok(v) = serde_json::to_value(value) {
            self.meta.insert(key.to_string(), v);
        }
    }

    pub fn csv_header(&self) -> Vec<String> {
        let mut header = vec!["step".to_string(), "time".into(), "loss".into()];
        header.extend((0..self.samples).map(|j| format!("f{j}")));
        for &id in &self.tracked_ids {
            header.extend((0..self.param_dim).map(|c| format!("x{id}_{c}")));
        }
        header
    }

    pub fn write_csv_to(&self, writer: impl Write) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(self.csv_header())?;
        for s in &self.snapshots {
            let mut row = vec![s.step.to_string(), s.time.to_string(), s.loss.to_string()];
            row.extend(s.predictor.iter().map(|v| v.to_string()));
            row.extend(s.tracked.iter().map(|v| v.to_string()));
            wtr.write_record(&row)?;
        }
        wtr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn sidecar(&self) -> Value {
        let mut doc = Map::new();
        doc.insert("param_dim".into(), self.param_dim.into());
        doc.insert("samples".into(), self.samples.into());
        doc.insert("tracked_ids".into(), self.tracked_ids.clone().into());
        doc.insert("snapshots".into(), self.snapshots.len().into());
        doc.insert("meta".into(), Value::Object(self.meta.clone()));
        Value::Object(doc)
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join(format!("{stem}.csv"));
        let file = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        self.write_csv_to(std::io::BufWriter::new(file))?;
        let json_path = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(&self.sidecar())?;
        std::fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
        Ok(())
    }
}
