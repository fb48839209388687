//! Coupled experiments between dynamics, the geometric/exponential jump-time
//! coupling, and neural-tangent-kernel diagnostics.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::finite::{self, MaskPlan, StepConfig, StepMasks, Variant};
use crate::harness::data::{init_ensemble, InitLaw};
use crate::limit::{
    self, coupled_step_count, ClockMasks, HyperSchedule, Integrator, JumpClock, JumpScheme, Phase,
};
use crate::model::{Model, ParticleEnsemble};
use crate::numeric::{dist, pairwise_accumulate};
use crate::record::{Recorder, TrajectoryRecord};
use crate::rng::{self, domain, lane, MaskRow, MaskSource, MaskStream};
use crate::transport::{self, path_sup_distance, rms_distance};

/// One measurement: `(n, seed, time, metric, value)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceRow {
    pub n: usize,
    pub seed: u64,
    pub time: f64,
    pub metric: String,
    pub value: f64,
}

impl DistanceRow {
    pub fn new(n: usize, seed: u64, time: f64, metric: &str, value: f64) -> Self {
        Self {
            n,
            seed,
            time,
            metric: metric.to_string(),
            value,
        }
    }
}

pub fn write_table(rows: &[DistanceRow], writer: impl Write) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["n", "seed", "time", "metric", "value"])?;
    for r in rows {
        wtr.write_record([
            r.n.to_string(),
            r.seed.to_string(),
            r.time.to_string(),
            r.metric.clone(),
            r.value.to_string(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("<table>", e))?;
    Ok(())
}

pub fn write_table_file(rows: &[DistanceRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_table(rows, std::io::BufWriter::new(file))
}

/// Mean of `metric` over seeds at each width, in width order.
pub fn seed_means(rows: &[DistanceRow], metric: &str, time: Option<f64>) -> Vec<(usize, f64)> {
    let mut widths: Vec<usize> = rows.iter().map(|r| r.n).collect();
    widths.sort_unstable();
    widths.dedup();
    widths
        .into_iter()
        .filter_map(|n| {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| r.n == n && r.metric == metric)
                .filter(|r| time.is_none_or(|t| (r.time - t).abs() <= 1e-9 * t.abs().max(1.0)))
                .map(|r| r.value)
                .collect();
            (!vals.is_empty()).then(|| (n, vals.iter().sum::<f64>() / vals.len() as f64))
        })
        .collect()
}

/// Distances between two variants run from the same initialization with the
/// same mask seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoupledOutcome {
    /// Sup over steps and tracked particles.
    pub path_sup: f64,
    /// RMS distance over all particles at the final step.
    pub rms_final: f64,
}

pub fn couple_variants(
    model: &Model,
    init: &ParticleEnsemble,
    a: &StepConfig,
    b: &StepConfig,
    mask_seed: u64,
    steps: u64,
    tracked: usize,
) -> Result<CoupledOutcome> {
    let rec = Recorder::every_step(tracked);
    let (ra, ea) = finite::run(model, init, a, mask_seed, steps, &rec)?;
    let (rb, eb) = finite::run(model, init, b, mask_seed, steps, &rec)?;
    Ok(CoupledOutcome {
        path_sup: path_sup_distance(&ra, &rb, None)?,
        rms_final: rms_distance(&ea, &eb)?,
    })
}

/// Dropout against RaM with shared initialization and masks, per width.
#[allow(clippy::too_many_arguments)]
pub fn couple_dropout_ram(
    model: &Model,
    law: &InitLaw,
    seed: u64,
    widths: &[usize],
    tau: f64,
    q: f64,
    steps: u64,
    tracked: usize,
) -> Result<Vec<DistanceRow>> {
    let cfg = StepConfig::new(tau, q, Variant::Dropout)?;
    let ram = cfg.with_variant(Variant::Ram);
    let mut rows = Vec::new();
    let n_max = widths.iter().copied().max().unwrap_or(0);
    if n_max == 0 {
        return Ok(rows);
    }
    let full = init_ensemble(n_max, model.param_dim(), law, seed)?;
    for &n in widths {
        let init = full.prefix(n)?;
        let out = couple_variants(model, &init, &cfg, &ram, seed, steps, tracked)?;
        let t = steps as f64 * tau;
        rows.push(DistanceRow::new(n, seed, t, "path_sup", out.path_sup));
        rows.push(DistanceRow::new(n, seed, t, "rms", out.rms_final));
    }
    Ok(rows)
}

/// RMS distance after `steps` steps between dropout and each of RaM,
/// plain GD and PN+RaM, all sharing initialization and mask seed.
#[allow(clippy::too_many_arguments)]
pub fn couple_teacher_student(
    model: &Model,
    law: &InitLaw,
    seed: u64,
    widths: &[usize],
    tau: f64,
    q: f64,
    steps: u64,
) -> Result<Vec<DistanceRow>> {
    let cfg = StepConfig::new(tau, q, Variant::Dropout)?;
    let rec = Recorder::with_stride(steps.max(1), 0);
    let n_max = widths.iter().copied().max().unwrap_or(0);
    let mut rows = Vec::new();
    if n_max == 0 {
        return Ok(rows);
    }
    let full = init_ensemble(n_max, model.param_dim(), law, seed)?;
    let t = steps as f64 * tau;
    for &n in widths {
        let init = full.prefix(n)?;
        let (_, dropout) = finite::run(model, &init, &cfg, seed, steps, &rec)?;
        for (variant, metric) in [
            (Variant::Ram, "rms_ram"),
            (Variant::PlainGd, "rms_plain_gd"),
            (Variant::PnRam, "rms_pn_ram"),
        ] {
            let (_, other) = finite::run(model, &init, &cfg.with_variant(variant), seed, steps, &rec)?;
            rows.push(DistanceRow::new(n, seed, t, metric, rms_distance(&dropout, &other)?));
        }
    }
    Ok(rows)
}

/// GD-dropout with `q_n = 1/(beta n)`, `tau_n = tau0 n^-a` against GD on the
/// explicitly penalized loss, both run to rescaled time `horizon`.
#[allow(clippy::too_many_arguments)]
pub fn couple_dropout_penalty(
    model: &Model,
    law: &InitLaw,
    seed: u64,
    widths: &[usize],
    beta: f64,
    tau0: f64,
    a: f64,
    horizon: f64,
    tracked: usize,
) -> Result<Vec<DistanceRow>> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::param("penalty coupling needs beta >= 0"));
    }
    let n_max = widths.iter().copied().max().unwrap_or(0);
    let mut rows = Vec::new();
    if n_max == 0 {
        return Ok(rows);
    }
    let full = init_ensemble(n_max, model.param_dim(), law, seed)?;
    for &n in widths {
        let tau = tau0 * (n as f64).powf(-a);
        // beta = 0 means no dropout at all.
        let q = (1.0 / (beta * n as f64)).min(1.0);
        let steps = (horizon / tau + 1e-9).floor() as u64;
        let dropout = StepConfig::new(tau, q, Variant::Dropout)?;
        let penalty = dropout.with_variant(Variant::ExplicitPenalty { beta });
        let out = couple_variants(model, &full.prefix(n)?, &dropout, &penalty, seed, steps, tracked)?;
        rows.push(DistanceRow::new(n, seed, horizon, "path_sup", out.path_sup));
    }
    Ok(rows)
}

/// One coupled draw of an exponential gap and its geometric step count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GeomExpSample {
    pub gap: f64,
    pub steps: u64,
    pub scaled_steps: f64,
    pub error: f64,
}

/// `count` coupled pairs `(dT, tau dK)` with `dT ~ Exp(mean alpha)` and
/// `dK = ceil(X'/tau)`, `X' = -dT tau / (alpha log(1 - q))`.
pub fn couple_geom_exp(
    alpha: f64,
    tau: f64,
    q: f64,
    count: usize,
    seed: u64,
) -> Result<Vec<GeomExpSample>> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::param(format!(
            "jump-time coupling needs q in (0, 1), got {q}"
        )));
    }
    let clock = JumpClock::new(alpha, seed)?;
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::param("tau must be positive"));
    }
    let mut rng = rng::stream(seed, domain::COUPLING, 0);
    Ok((0..count)
        .map(|_| {
            let gap = clock.gap(&mut rng);
            let steps = coupled_step_count(gap, alpha, tau, q);
            let scaled = tau * steps as f64;
            GeomExpSample {
                gap,
                steps,
                scaled_steps: scaled,
                error: (scaled - gap).abs(),
            }
        })
        .collect())
}

/// `dT alpha_n / ((1 + q) alpha) <= tau dK < dT alpha_n / alpha + tau`.
pub fn sandwich_holds(s: &GeomExpSample, alpha: f64, tau: f64, q: f64) -> bool {
    let alpha_n = tau / q;
    let lower = s.gap * alpha_n / ((1.0 + q) * alpha);
    let upper = s.gap * alpha_n / alpha + tau;
    lower <= s.scaled_steps && s.scaled_steps < upper
}

/// Smallest `n <= n_max` from which the sandwich bounds hold for every
/// sample, i.e. `-log(1 - q_m) <= q_m + q_m^2` for all `n <= m <= n_max`.
pub fn sandwich_threshold(q_of: impl Fn(usize) -> f64, n_max: usize) -> Option<usize> {
    let ok = |n: usize| {
        let q = q_of(n);
        q > 0.0 && q < 1.0 && -(-q).ln_1p() <= q + q * q
    };
    if !ok(n_max) {
        return None;
    }
    let mut n = n_max;
    while n > 1 && ok(n - 1) {
        n -= 1;
    }
    Some(n)
}

/// Longest finite run a coupled experiment will attempt.
pub const MAX_STEPS: u64 = 10_000_000;

/// Finite run sampled at chosen steps.
fn finite_checkpoints(
    model: &Model,
    init: &ParticleEnsemble,
    cfg: &StepConfig,
    plan: &MaskPlan<'_>,
    checkpoints: &[u64],
) -> Result<Vec<ParticleEnsemble>> {
    let last = checkpoints.iter().copied().max().unwrap_or(0);
    if last > MAX_STEPS {
        return Err(Error::param(format!(
            "coupled run needs {last} steps, more than {MAX_STEPS}"
        )));
    }
    let n = init.len();
    let mut out = Vec::with_capacity(checkpoints.len());
    let mut ens = init.clone();
    let mut next = 0;
    while next < checkpoints.len() && checkpoints[next] == 0 {
        out.push(ens.clone());
        next += 1;
    }
    for k in 1..=last {
        let masks = StepMasks {
            primary: plan.primary.row(k, n),
            forward: plan.forward.map(|f| f.row(k, n)),
        };
        ens = finite::step(model, &ens, cfg, &masks)?;
        if let Some(particle) = ens.first_non_finite() {
            return Err(Error::NumericalAbort { step: k, particle });
        }
        while next < checkpoints.len() && checkpoints[next] == k {
            out.push(ens.clone());
            next += 1;
        }
    }
    Ok(out)
}

fn tracked_sup(a: &[ParticleEnsemble], b: &[ParticleEnsemble], tracked: usize) -> f64 {
    let mut sup: f64 = 0.0;
    for (x, y) in a.iter().zip(b) {
        for i in 0..tracked.min(x.len()).min(y.len()) {
            sup = sup.max(dist(x.particle(i), y.particle(i)));
        }
    }
    sup
}

/// Settings for [`couple_finite_limit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteLimitSpec {
    pub schedule: HyperSchedule,
    /// Rescaled horizon (steps for phase I).
    pub horizon: f64,
    /// Times (steps for phase I) at which W1 is reported.
    pub measure_times: Vec<f64>,
    /// Number of equally spaced points of the path grid.
    pub path_points: usize,
    pub tracked: usize,
    /// RK4 step of the flow reference.
    pub flow_step: f64,
    pub law: InitLaw,
}

/// W1 (and, in phases I and II, tracked path distance) between a width-`n`
/// finite run and the limit simulator at width `n_ref`, sharing the first
/// `n` initial particles and, where the phase allows, the randomness.
pub fn finite_vs_limit(
    model: &Model,
    spec: &FiniteLimitSpec,
    n: usize,
    n_ref: usize,
    seed: u64,
) -> Result<Vec<DistanceRow>> {
    if n_ref < n {
        return Err(Error::param("reference width must be at least the finite width"));
    }
    let s = &spec.schedule;
    let phase = s.classify();
    let full = init_ensemble(n_ref, model.param_dim(), &spec.law, seed)?;
    let init = full.prefix(n)?;
    let tau = s.tau(n);
    let q = s.q(n);
    let cfg = StepConfig::new(tau, q, Variant::Dropout)?;
    let mut rows = Vec::new();
    let points = spec.path_points.max(1);
    match phase {
        Phase::DiscreteJump { q, alpha, .. } => {
            let steps = spec.horizon.round() as u64;
            let ckpts: Vec<u64> = (0..=steps).collect();
            let masks = MaskStream::new(q, seed)?;
            let plan = MaskPlan {
                primary: &masks,
                forward: None,
            };
            let fin = finite_checkpoints(model, &init, &cfg, &plan, &ckpts)?;
            let mut reference = Vec::with_capacity(ckpts.len());
            let mut ens = full.clone();
            reference.push(ens.prefix(n)?);
            for k in 1..=steps {
                ens = limit::discrete_jump_step(model, &ens, alpha, &masks.row(k, n_ref))?;
                reference.push(ens.prefix(n)?);
            }
            for &t in &spec.measure_times {
                let k = t.round() as usize;
                if k <= steps as usize {
                    let (w, exact) = transport::w1_auto(&fin[k], &reference[k], seed)?;
                    rows.push(DistanceRow::new(n, seed, k as f64, w1_name(exact), w));
                }
            }
            rows.push(DistanceRow::new(
                n,
                seed,
                steps as f64,
                "path_sup",
                tracked_sup(&fin, &reference, spec.tracked),
            ));
        }
        Phase::GradientFlow { beta } => {
            let grid: Vec<f64> = (0..=points).map(|j| spec.horizon * j as f64 / points as f64).collect();
            let ckpts: Vec<u64> = grid.iter().map(|t| (t / tau + 1e-9).floor() as u64).collect();
            let masks = MaskStream::new(q, seed)?;
            let plan = MaskPlan {
                primary: &masks,
                forward: None,
            };
            let fin = finite_checkpoints(model, &init, &cfg, &plan, &ckpts)?;
            let rec = Recorder::on_time_grid(spec.horizon / points as f64, 0).keeping_ensembles();
            let (record, _) = limit::wgf_simulate(
                model,
                &full,
                beta,
                spec.horizon,
                spec.flow_step,
                Integrator::Rk4,
                &rec,
            )?;
            let reference = prefixes(&record, n)?;
            for &t in &spec.measure_times {
                if let Some(j) = grid.iter().position(|g| (g - t).abs() < 1e-9) {
                    let (w, exact) = transport::w1_auto(&fin[j], &reference[j], seed)?;
                    rows.push(DistanceRow::new(n, seed, t, w1_name(exact), w));
                }
            }
            rows.push(DistanceRow::new(
                n,
                seed,
                spec.horizon,
                "path_sup",
                tracked_sup(&fin, &reference, spec.tracked),
            ));
        }
        Phase::ContinuousJump { alpha } => {
            let clock = JumpClock::new(alpha, seed)?;
            let ckpts: Vec<u64> = spec
                .measure_times
                .iter()
                .map(|t| (t / tau + 1e-9).floor() as u64)
                .collect();
            let last = ckpts.iter().copied().max().unwrap_or(0);
            let masks = ClockMasks::new(&clock, tau, q, n, last)?;
            let plan = MaskPlan {
                primary: &masks,
                forward: None,
            };
            let fin = finite_checkpoints(model, &init, &cfg, &plan, &ckpts)?;
            for (j, &t) in spec.measure_times.iter().enumerate() {
                let run = limit::ctsjump_simulate(
                    model,
                    &full,
                    alpha,
                    t,
                    JumpScheme::EventDriven,
                    seed,
                    &Recorder::default(),
                )?;
                let (w, exact) = transport::w1_auto(&fin[j], &run.final_state.prefix(n)?, seed)?;
                rows.push(DistanceRow::new(n, seed, t, w1_name(exact), w));
            }
        }
        Phase::Critical { alpha, beta } => {
            let ckpts: Vec<u64> = spec
                .measure_times
                .iter()
                .map(|t| (t / tau + 1e-9).floor() as u64)
                .collect();
            let masks = MaskStream::new(q, seed)?;
            let plan = MaskPlan {
                primary: &masks,
                forward: None,
            };
            let fin = finite_checkpoints(model, &init, &cfg, &plan, &ckpts)?;
            for (j, &t) in spec.measure_times.iter().enumerate() {
                let run = limit::critical_simulate(model, &full, alpha, beta, t, seed, &Recorder::default())?;
                let (w, exact) = transport::w1_auto(&fin[j], &run.final_state.prefix(n)?, seed)?;
                rows.push(DistanceRow::new(n, seed, t, w1_name(exact), w));
            }
        }
        Phase::Degenerate { reason } => {
            return Err(Error::Unsupported(format!("degenerate schedule: {reason}")))
        }
    }
    Ok(rows)
}

fn w1_name(exact: bool) -> &'static str {
    if exact {
        "w1"
    } else {
        "w1_sliced"
    }
}

fn prefixes(record: &TrajectoryRecord, n: usize) -> Result<Vec<ParticleEnsemble>> {
    record
        .snapshots
        .iter()
        .map(|s| {
            s.ensemble
                .as_ref()
                .ok_or_else(|| Error::param("reference record lacks ensembles"))?
                .prefix(n)
        })
        .collect()
}

/// [`finite_vs_limit`] over widths and seeds, with the reference at
/// `ref_factor` times the largest width.
pub fn couple_finite_limit(
    model: &Model,
    spec: &FiniteLimitSpec,
    widths: &[usize],
    seeds: &[u64],
    ref_factor: usize,
) -> Result<Vec<DistanceRow>> {
    let n_ref = ref_factor * widths.iter().copied().max().unwrap_or(0);
    let mut rows = Vec::new();
    for &seed in seeds {
        for &n in widths {
            rows.extend(finite_vs_limit(model, spec, n, n_ref, seed)?);
        }
    }
    Ok(rows)
}

/// `NTK(mu) = (1/n) sum_i Dphi(x^i) Dphi(x^i)^T` on the training set.
#[derive(Debug, Clone, PartialEq)]
pub struct NtkGram {
    pub matrix: DMatrix<f64>,
}

impl NtkGram {
    pub fn asymmetry(&self) -> f64 {
        (&self.matrix - self.matrix.transpose()).abs().max()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.matrix.clone()).eigenvalues.min()
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }

    pub fn frobenius(&self) -> f64 {
        self.matrix.norm()
    }

    /// Symmetric to 1e-12 and PSD up to `1e-9 * trace`.
    pub fn is_valid(&self) -> bool {
        self.asymmetry() <= 1e-12 && self.min_eigenvalue() >= -1e-9 * self.trace().abs()
    }
}

pub fn ntk_gram(model: &Model, ens: &ParticleEnsemble) -> Result<NtkGram> {
    model.check_ensemble(ens)?;
    let m = model.samples();
    let p = model.param_dim();
    let sum = pairwise_accumulate(ens.len(), m * m, &|i, acc: &mut [f64]| {
        let jac = model.jacobian(ens.particle(i)).expect("checked dimensions");
        for a in 0..m {
            for b in 0..m {
                let mut s = 0.0;
                for c in 0..p {
                    s += jac[(a, c)] * jac[(b, c)];
                }
                acc[a * m + b] += s;
            }
        }
    });
    let n = ens.len() as f64;
    Ok(NtkGram {
        matrix: DMatrix::from_row_iterator(m, m, sum.into_iter().map(|v| v / n)),
    })
}

/// Relative residual of the moving-average identity
/// `NTK(rho_t) = e^{-t/alpha} NTK(rho_0) + (1/alpha) int_0^t e^{(s-t)/alpha} NTK(T_alpha rho_s) ds`
/// at every snapshot of `record`, where `T_alpha` is one GD step of rate
/// `alpha`. The record must hold ensembles on a uniform grid no coarser
/// than `alpha / 10`.
pub fn ntk_ema_residual(model: &Model, record: &TrajectoryRecord, alpha: f64) -> Result<Vec<(f64, f64)>> {
    let snaps = &record.snapshots;
    if snaps.len() < 2 {
        return Err(Error::param("need at least two snapshots"));
    }
    let dt = snaps[1].time - snaps[0].time;
    for w in snaps.windows(2) {
        if ((w[1].time - w[0].time) - dt).abs() > 1e-9 * dt.max(1.0) {
            return Err(Error::GridMismatch("snapshot times are not uniform".into()));
        }
    }
    if dt > alpha / 10.0 + 1e-12 {
        return Err(Error::param(format!(
            "grid spacing {dt} is coarser than alpha/10 = {}",
            alpha / 10.0
        )));
    }
    let mut ntk = Vec::with_capacity(snaps.len());
    let mut pushed = Vec::with_capacity(snaps.len());
    for s in snaps {
        let ens = s
            .ensemble
            .as_ref()
            .ok_or_else(|| Error::param("snapshots must store ensembles"))?;
        ntk.push(ntk_gram(model, ens)?.matrix);
        pushed.push(ntk_gram(model, &finite::plain_gd_step(model, ens, alpha)?)?.matrix);
    }
    let t0 = snaps[0].time;
    let mut out = Vec::with_capacity(snaps.len());
    for k in 0..snaps.len() {
        let t = snaps[k].time - t0;
        let mut integral = DMatrix::zeros(ntk[0].nrows(), ntk[0].ncols());
        for j in 0..=k {
            let w = if k == 0 {
                0.0
            } else if j == 0 || j == k {
                0.5 * dt
            } else {
                dt
            };
            let s = snaps[j].time - t0;
            integral += &pushed[j] * (w * ((s - t) / alpha).exp());
        }
        let predicted = &ntk[0] * (-t / alpha).exp() + integral / alpha;
        let denom = ntk[k].norm();
        out.push((t, (&ntk[k] - predicted).norm() / denom));
    }
    Ok(out)
}

/// Case-III run recorded with full ensembles on a grid of spacing `grid`.
pub fn ntk_run(
    model: &Model,
    init: &ParticleEnsemble,
    alpha: f64,
    horizon: f64,
    grid: f64,
    seed: u64,
) -> Result<TrajectoryRecord> {
    let rec = Recorder::on_time_grid(grid, 0).keeping_ensembles();
    Ok(limit::ctsjump_simulate(model, init, alpha, horizon, JumpScheme::EventDriven, seed, &rec)?.record)
}

/// Row with independent masks on a separate lane; handy for decompositions.
pub fn tilde_row(q: f64, seed: u64, step: u64, n: usize) -> Result<MaskRow> {
    Ok(MaskStream::new(q, seed)?.with_lane(lane::TILDE).row(step, n))
}

/// Mean absolute gap between coupled exponential and geometric jump times.
pub fn mean_coupling_error(samples: &[GeomExpSample]) -> f64 {
    samples.iter().map(|s| s.error).sum::<f64>() / samples.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Dataset, FeatureKind, FeatureMap};
    use rand::Rng;

    fn instance(n: usize, seed: u64) -> (Model, ParticleEnsemble) {
        let d = 3;
        let m = 5;
        let mut rng = rng::stream(seed, domain::MONTE_CARLO, 0);
        let inputs: Vec<f64> = (0..m * d).map(|_| rng.random_range(-1.5..1.5)).collect();
        let targets: Vec<f64> = (0..m).map(|_| rng.random_range(-0.5..0.5)).collect();
        let data = Dataset::from_flat(d, inputs, targets).unwrap();
        let model = Model::new(FeatureMap::new(FeatureKind::BoundedSmooth, d), data).unwrap();
        let flat = (0..n * (d + 2)).map(|_| rng.random_range(-1.0..1.0)).collect();
        (model, ParticleEnsemble::from_flat(d + 2, flat).unwrap())
    }

    fn fitted(model: &Model, ens: &ParticleEnsemble) -> Model {
        let data = model.data();
        let flat = (0..data.len()).flat_map(|j| data.input(j).to_vec()).collect();
        let y = model.predictor(ens).unwrap();
        Model::new(*model.map(), Dataset::from_flat(data.input_dim(), flat, y).unwrap()).unwrap()
    }

    #[test]
    fn dropout_ram_distance_vanishes_without_masks_or_steps() {
        let (model, _) = instance(1, 1);
        let law = InitLaw::standard(3);
        for row in couple_dropout_ram(&model, &law, 4, &[8, 32], 0.3, 1.0, 20, 4).unwrap() {
            assert_eq!(row.value, 0.0, "{row:?}");
        }
        for row in couple_dropout_ram(&model, &law, 4, &[8, 32], 0.3, 0.5, 0, 4).unwrap() {
            assert_eq!(row.value, 0.0, "{row:?}");
        }
        let some = couple_dropout_ram(&model, &law, 4, &[8], 0.3, 0.5, 5, 4).unwrap();
        assert!(some[0].value > 0.0);
    }

    #[test]
    fn coupled_tables_are_reproducible() {
        let (model, _) = instance(1, 2);
        let law = InitLaw::standard(3);
        let a = couple_dropout_ram(&model, &law, 9, &[16, 64], 0.2, 0.5, 10, 3).unwrap();
        let b = couple_dropout_ram(&model, &law, 9, &[16, 64], 0.2, 0.5, 10, 3).unwrap();
        assert_eq!(a, b);
        let mut buf = Vec::new();
        write_table(&a, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("n,seed,time,metric,value\n16,9,2,path_sup,"));
        assert_eq!(seed_means(&a, "rms", None).len(), 2);
    }

    #[test]
    fn penalty_coupling_is_stationary_at_a_fitted_start() {
        let (model, _) = instance(1, 3);
        let law = InitLaw::standard(3);
        let init = init_ensemble(16, model.param_dim(), &law, 5).unwrap();
        let model = fitted(&model, &init);
        let rows = couple_dropout_penalty(&model, &law, 5, &[16], 0.0, 0.1, 1.5, 1.0, 4).unwrap();
        assert_eq!(rows[0].value, 0.0);
        assert!(couple_dropout_penalty(&model, &law, 5, &[16], -1.0, 0.1, 1.5, 1.0, 4).is_err());
    }

    #[test]
    fn geometric_marginal_has_mean_one_over_q() {
        let q = 0.2;
        let samples = couple_geom_exp(1.0, 0.2, q, 100_000, 3).unwrap();
        let steps: Vec<f64> = samples.iter().map(|s| s.steps as f64).collect();
        let (mean, se) = crate::numeric::mean_and_stderr(&steps);
        assert!((mean - 1.0 / q).abs() <= 3.0 * se, "{mean} +- {se}");
        assert!(couple_geom_exp(1.0, 0.2, 1.0, 10, 3).is_err());
    }

    #[test]
    fn sandwich_holds_past_threshold() {
        let alpha = 1.0;
        let q_of = |n: usize| (n as f64).powf(-0.5) / alpha;
        assert_eq!(sandwich_threshold(q_of, 10_000), Some(3));
        for n in [3usize, 10, 100, 10_000] {
            let (tau, q) = ((n as f64).powf(-0.5), q_of(n));
            for s in couple_geom_exp(alpha, tau, q, 10_000, n as u64).unwrap() {
                assert!(sandwich_holds(&s, alpha, tau, q), "n = {n}: {s:?}");
            }
        }
        // q = 0.7 violates -log(1 - q) <= q + q^2.
        assert_eq!(sandwich_threshold(|_| 0.7, 10), None);
    }

    #[test]
    fn coupling_error_decays_with_width() {
        let alpha = 1.0;
        let errs: Vec<f64> = [100usize, 1000, 10_000]
            .iter()
            .map(|&n| {
                let tau = (n as f64).powf(-0.5);
                mean_coupling_error(&couple_geom_exp(alpha, tau, tau / alpha, 20_000, 7).unwrap())
            })
            .collect();
        assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
    }

    #[test]
    fn single_particle_ntk_is_jacobian_outer_product() {
        let (model, ens) = instance(1, 4);
        let j = model.jacobian(ens.particle(0)).unwrap();
        let gram = ntk_gram(&model, &ens).unwrap();
        assert_eq!(gram.matrix, &j * j.transpose());
    }

    #[test]
    fn ntk_matches_naive_loop_bitwise() {
        let (model, ens) = instance(16, 5);
        let m = model.samples();
        let mut naive = DMatrix::<f64>::zeros(m, m);
        for x in ens.iter() {
            let j = model.jacobian(x).unwrap();
            for a in 0..m {
                for b in 0..m {
                    let mut s = 0.0;
                    for c in 0..model.param_dim() {
                        s += j[(a, c)] * j[(b, c)];
                    }
                    naive[(a, b)] += s;
                }
            }
        }
        naive /= 16.0;
        let gram = ntk_gram(&model, &ens).unwrap();
        assert_eq!(gram.matrix, naive);
        assert!(gram.is_valid());
    }

    #[test]
    fn saturated_units_have_vanishing_ntk() {
        let (model, _) = instance(1, 6);
        let ens = ParticleEnsemble::from_flat(5, vec![50.0, 0.0, 0.0, 0.0, 50.0]).unwrap();
        assert!(ntk_gram(&model, &ens).unwrap().frobenius() < 1e-30);
    }

    #[test]
    fn ema_identity_is_exact_at_a_fixed_point() {
        let (model, ens) = instance(64, 7);
        let model = fitted(&model, &ens);
        let alpha = 0.5;
        let record = ntk_run(&model, &ens, alpha, 2.0 * alpha, alpha / 50.0, 1).unwrap();
        let res = ntk_ema_residual(&model, &record, alpha).unwrap();
        assert_eq!(res[0], (0.0, 0.0));
        assert!(res.iter().all(|&(_, r)| r < 1e-4), "{:?}", res.last());
        let coarse = ntk_run(&model, &ens, alpha, 2.0 * alpha, alpha / 5.0, 1).unwrap();
        assert!(ntk_ema_residual(&model, &coarse, alpha).is_err());
    }

    #[test]
    fn phase_one_at_reference_width_with_unit_keep_rate_coincides() {
        let (model, _) = instance(1, 8);
        let spec = FiniteLimitSpec {
            schedule: HyperSchedule::new(0.5, 1.0, 0.0, 0.0).unwrap(),
            horizon: 10.0,
            measure_times: vec![5.0, 10.0],
            path_points: 10,
            tracked: 4,
            flow_step: 0.01,
            law: InitLaw::standard(3),
        };
        let rows = finite_vs_limit(&model, &spec, 32, 32, 3).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.value == 0.0), "{rows:?}");
        let degenerate = FiniteLimitSpec {
            schedule: HyperSchedule::new(0.5, 0.5, 0.0, 0.5).unwrap(),
            ..spec
        };
        assert!(matches!(
            finite_vs_limit(&model, &degenerate, 8, 8, 3),
            Err(Error::Unsupported(_))
        ));
    }
}
