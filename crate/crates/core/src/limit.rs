//! Large-width limits: schedule classification and particle simulators for
//! the discrete jump recursion, the mean-field gradient flow, the Poisson
//! clock jump process and the critical kernel, plus a generic
//! stochastic-approximation runner.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::finite::kernel_increments;
use crate::model::{Model, ParticleEnsemble};
use crate::numeric::pairwise_row_sum;
use crate::record::{Recorder, TrajectoryRecord};
use crate::rng::{self, check_keep_rate, domain, unit_f64, MaskRow, MaskSource, MaskStream};

/// Width-indexed rates `tau_n = tau0 n^-a` and `q_n = min(q0 n^-b, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperSchedule {
    pub tau0: f64,
    pub q0: f64,
    pub a: f64,
    pub b: f64,
}

impl HyperSchedule {
    pub fn new(tau0: f64, q0: f64, a: f64, b: f64) -> Result<Self> {
        let s = Self { tau0, q0, a, b };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau0.is_finite() && self.tau0 > 0.0) {
            return Err(Error::param(format!("tau0 must be positive, got {}", self.tau0)));
        }
        check_keep_rate(self.q0)?;
        if !(self.a.is_finite() && self.a >= 0.0 && self.b.is_finite() && self.b >= 0.0) {
            return Err(Error::param(format!(
                "exponents must be finite and >= 0, got a = {}, b = {}",
                self.a, self.b
            )));
        }
        Ok(())
    }

    pub fn tau(&self, n: usize) -> f64 {
        self.tau0 * (n as f64).powf(-self.a)
    }

    pub fn q(&self, n: usize) -> f64 {
        (self.q0 * (n as f64).powf(-self.b)).min(1.0)
    }

    pub fn alpha(&self, n: usize) -> f64 {
        self.tau(n) / self.q(n)
    }

    pub fn beta(&self, n: usize) -> f64 {
        1.0 / (n as f64 * self.q(n))
    }

    pub fn classify(&self) -> Phase {
        classify(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "kebab-case")]
pub enum Phase {
    DiscreteJump { tau: f64, q: f64, alpha: f64 },
    GradientFlow { beta: f64 },
    ContinuousJump { alpha: f64 },
    Critical { alpha: f64, beta: f64 },
    Degenerate { reason: String },
}

impl Phase {
    pub fn numeral(&self) -> &'static str {
        match self {
            Phase::DiscreteJump { .. } => "I",
            Phase::GradientFlow { .. } => "II",
            Phase::ContinuousJump { .. } => "III",
            Phase::Critical { .. } => "IV",
            Phase::Degenerate { .. } => "degenerate",
        }
    }

    pub fn is_degenerate(&self) -> bool {
        matches!(self, Phase::Degenerate { .. })
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::DiscreteJump { alpha, .. } => write!(f, "Phase I, alpha={alpha}"),
            Phase::GradientFlow { beta } => write!(f, "Phase II, beta={beta}"),
            Phase::ContinuousJump { alpha } => write!(f, "Phase III, alpha={alpha}"),
            Phase::Critical { alpha, beta } => write!(f, "Phase IV, alpha={alpha}, beta={beta}"),
            Phase::Degenerate { reason } => write!(f, "Degenerate ({reason})"),
        }
    }
}

/// Limit regime of a schedule as `n -> infinity`.
pub fn classify(s: &HyperSchedule) -> Phase {
    let (a, b) = (s.a, s.b);
    if b > 1.0 {
        return Phase::Degenerate {
            reason: "b > 1: n q_n -> 0, beta infinite".into(),
        };
    }
    if a < b {
        return Phase::Degenerate {
            reason: "a < b: tau_n / q_n -> infinity".into(),
        };
    }
    if a > b {
        let beta = if b < 1.0 { 0.0 } else { 1.0 / s.q0 };
        return Phase::GradientFlow { beta };
    }
    // a == b from here on.
    let alpha = s.tau0 / s.q0;
    if a == 0.0 {
        Phase::DiscreteJump {
            tau: s.tau0,
            q: s.q0,
            alpha,
        }
    } else if a < 1.0 {
        Phase::ContinuousJump { alpha }
    } else {
        Phase::Critical {
            alpha,
            beta: 1.0 / s.q0,
        }
    }
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::param(format!("{name} must be positive, got {v}")))
    }
}

/// Mean-field velocity `-(grad V[mu](x^i) + beta grad P(x^i))`, row-major.
pub fn velocity(model: &Model, ens: &ParticleEnsemble, beta: f64) -> Result<Vec<f64>> {
    model.check_ensemble(ens)?;
    Ok(kernel_increments(model, ens, |_| 1.0, |_| 1.0, beta).0)
}

/// One step of the discrete jump recursion: particles kept by `masks` move
/// to `x - alpha grad V[mu](x)` against the pre-step ensemble.
pub fn discrete_jump_step(
    model: &Model,
    ens: &ParticleEnsemble,
    alpha: f64,
    masks: &MaskRow,
) -> Result<ParticleEnsemble> {
    model.check_ensemble(ens)?;
    check_positive("alpha", alpha)?;
    if masks.len() != ens.len() {
        return Err(Error::dim("mask row", ens.len(), masks.len()));
    }
    let moves = |i: usize| masks.factor(i) != 0.0;
    let (inc, _) = kernel_increments(
        model,
        ens,
        |_| 1.0,
        |i| if moves(i) { alpha } else { 0.0 },
        0.0,
    );
    let mut next = ens.clone();
    let p = ens.dim();
    for (i, (x, d)) in next.as_flat_mut().chunks_exact_mut(p).zip(inc.chunks_exact(p)).enumerate() {
        if moves(i) {
            x.iter_mut().zip(d).for_each(|(xk, dk)| *xk += dk);
        }
    }
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Integrator {
    Euler,
    Rk4,
}

fn axpy(ens: &ParticleEnsemble, h: f64, v: &[f64]) -> ParticleEnsemble {
    let mut next = ens.clone();
    next.as_flat_mut().iter_mut().zip(v).for_each(|(x, d)| *x += h * d);
    next
}

/// One step of the mean-field gradient flow with the dropout penalty.
pub fn wgf_step(
    model: &Model,
    ens: &ParticleEnsemble,
    beta: f64,
    h: f64,
    integrator: Integrator,
) -> Result<ParticleEnsemble> {
    check_positive("time step", h)?;
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(Error::param(format!("beta must be >= 0, got {beta}")));
    }
    let k1 = velocity(model, ens, beta)?;
    match integrator {
        Integrator::Euler => Ok(axpy(ens, h, &k1)),
        Integrator::Rk4 => {
            let k2 = velocity(model, &axpy(ens, h / 2.0, &k1), beta)?;
            let k3 = velocity(model, &axpy(ens, h / 2.0, &k2), beta)?;
            let k4 = velocity(model, &axpy(ens, h, &k3), beta)?;
            let mut next = ens.clone();
            for (k, x) in next.as_flat_mut().iter_mut().enumerate() {
                *x += h / 6.0 * (k1[k] + 2.0 * k2[k] + 2.0 * k3[k] + k4[k]);
            }
            Ok(next)
        }
    }
}

/// Integrates the flow to time `horizon` with steps of at most `h`,
/// recording on the recorder's time grid (or every step without one).
pub fn wgf_simulate(
    model: &Model,
    init: &ParticleEnsemble,
    beta: f64,
    horizon: f64,
    h: f64,
    integrator: Integrator,
    recorder: &Recorder,
) -> Result<(TrajectoryRecord, ParticleEnsemble)> {
    check_positive("horizon", horizon)?;
    check_positive("time step", h)?;
    let mut record = recorder.start(model, init);
    record.set_meta("phase", "II");
    record.set_meta("beta", beta);
    record.set_meta("integrator", integrator);
    let grid = grid_times(recorder, horizon, h);
    let mut ens = init.clone();
    let mut t = 0.0;
    record.push(recorder.snapshot(model, &ens, 0, 0.0)?);
    for (j, &target) in grid.iter().enumerate().skip(1) {
        let span = target - t;
        let sub = (span / h).ceil().max(1.0) as usize;
        let hs = span / sub as f64;
        for _ in 0..sub {
            ens = wgf_step(model, &ens, beta, hs, integrator)?;
        }
        t = target;
        if let Some(particle) = ens.first_non_finite() {
            return Err(Error::NumericalAbort { step: j as u64, particle });
        }
        record.push(recorder.snapshot(model, &ens, j as u64, t)?);
    }
    Ok((record, ens))
}

/// Recording times `0, g, 2g, ..` up to the horizon (inclusive).
fn grid_times(recorder: &Recorder, horizon: f64, fallback: f64) -> Vec<f64> {
    let g = recorder.time_grid.unwrap_or(fallback);
    let count = (horizon / g + 1e-9).floor() as usize;
    let mut times: Vec<f64> = (0..=count).map(|j| j as f64 * g).collect();
    if horizon - times[count] > 1e-9 * horizon {
        times.push(horizon);
    }
    times
}

/// Independent exponential clocks with mean `alpha`, one per particle.
/// The gaps of particle `i` are read from its own counter stream, so the
/// first `n` clocks are shared by every width `n' >= n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JumpClock {
    pub alpha: f64,
    pub seed: u64,
}

impl JumpClock {
    pub fn new(alpha: f64, seed: u64) -> Result<Self> {
        check_positive("alpha", alpha)?;
        Ok(Self { alpha, seed })
    }

    pub fn particle_rng(&self, i: usize) -> ChaCha8Rng {
        rng::stream(self.seed, domain::CLOCK, i as u64)
    }

    /// Next gap from a particle stream.
    pub fn gap(&self, rng: &mut ChaCha8Rng) -> f64 {
        -self.alpha * (1.0 - unit_f64(rng)).ln()
    }

    /// The first `count` gaps of particle `i`.
    pub fn gaps(&self, i: usize, count: usize) -> Vec<f64> {
        let mut rng = self.particle_rng(i);
        (0..count).map(|_| self.gap(&mut rng)).collect()
    }
}

/// Geometric step count coupled to an exponential gap:
/// `ceil(X'/tau)` with `X' = -gap tau / (alpha log(1 - q))`.
pub fn coupled_step_count(gap: f64, alpha: f64, tau: f64, q: f64) -> u64 {
    let x_prime = -gap * tau / (alpha * (-q).ln_1p());
    ((x_prime / tau).ceil() as u64).max(1)
}

/// Dropout masks driven by the same clocks as an event-driven reference:
/// particle `i` is kept at the steps `K_l = sum_{l' <= l} dK_l'` where each
/// `dK` is [`coupled_step_count`] of the particle's exponential gap. In law
/// these are i.i.d. Bernoulli(q) masks.
#[derive(Debug, Clone)]
pub struct ClockMasks {
    q: f64,
    active: Vec<Vec<u64>>,
}

impl ClockMasks {
    pub fn new(clock: &JumpClock, tau: f64, q: f64, n: usize, max_step: u64) -> Result<Self> {
        check_positive("tau", tau)?;
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::param(format!("clock masks need q in (0, 1), got {q}")));
        }
        let active = (0..n)
            .map(|i| {
                let mut rng = clock.particle_rng(i);
                let mut steps = Vec::new();
                let mut k = 0u64;
                loop {
                    k += coupled_step_count(clock.gap(&mut rng), clock.alpha, tau, q);
                    if k > max_step {
                        break;
                    }
                    steps.push(k);
                }
                steps
            })
            .collect();
        Ok(Self { q, active })
    }

    pub fn active_steps(&self, i: usize) -> &[u64] {
        &self.active[i]
    }
}

impl MaskSource for ClockMasks {
    fn row(&self, step: u64, n: usize) -> MaskRow {
        let up = (1.0 - self.q) / self.q;
        let eta = (0..n)
            .map(|i| {
                if self.active[i].binary_search(&step).is_ok() {
                    up
                } else {
                    -1.0
                }
            })
            .collect();
        MaskRow::from_parts(self.q, eta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum JumpScheme {
    /// Exact simulation from the particles' exponential clocks.
    EventDriven,
    /// Fixed ticks; each particle jumps with probability `dt / alpha`.
    Thinning { dt: f64 },
}

/// Output of a jump-process simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpRun {
    pub record: TrajectoryRecord,
    pub final_state: ParticleEnsemble,
    pub jump_counts: Vec<u32>,
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    particle: usize,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // Reversed so the max-heap pops the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.particle.cmp(&self.particle))
    }
}

/// Particle system with cached features for sequential single-particle jumps.
struct JumpState<'a> {
    model: &'a Model,
    ens: ParticleEnsemble,
    rows: Vec<f64>,
    sum: Vec<f64>,
    since_refresh: usize,
}

impl<'a> JumpState<'a> {
    fn new(model: &'a Model, ens: ParticleEnsemble) -> Self {
        let rows = model.weighted_feature_rows(&ens, |_| 1.0);
        let sum = pairwise_row_sum(&rows, model.samples());
        Self {
            model,
            ens,
            rows,
            sum,
            since_refresh: 0,
        }
    }

    fn predictor(&self) -> Vec<f64> {
        let n = self.ens.len() as f64;
        self.sum.iter().map(|v| v / n).collect()
    }

    /// Moves particle `i` by `-alpha Dphi(x)^T v - alpha beta grad P(x)`.
    fn jump(&mut self, i: usize, v: &[f64], alpha: f64, beta: f64) {
        let m = self.model.samples();
        let p = self.ens.dim();
        let x = self.ens.particle(i).to_vec();
        let mut h = vec![0.0; m];
        self.model.activations_into(&x, &mut h);
        let mut g = vec![0.0; p];
        self.model.vjp_from_activations(&x, &h, v, &mut g);
        if beta != 0.0 {
            let row = &self.rows[i * m..(i + 1) * m];
            let mut gp = vec![0.0; p];
            self.model.vjp_from_activations(&x, &h, row, &mut gp);
            g.iter_mut().zip(&gp).for_each(|(a, b)| *a += beta * b);
        }
        let xi = self.ens.particle_mut(i);
        xi.iter_mut().zip(&g).for_each(|(xk, gk)| *xk -= alpha * gk);
        self.refresh_row(i);
    }

    fn refresh_row(&mut self, i: usize) {
        let m = self.model.samples();
        let mut h = vec![0.0; m];
        let x = self.ens.particle(i).to_vec();
        self.model.activations_into(&x, &mut h);
        let mut phi = vec![0.0; m];
        self.model.features_from_activations(&x, &h, &mut phi);
        let row = &mut self.rows[i * m..(i + 1) * m];
        for ((s, r), v) in self.sum.iter_mut().zip(row.iter()).zip(&phi) {
            *s += v - r;
        }
        row.copy_from_slice(&phi);
        self.since_refresh += 1;
        if self.since_refresh >= self.ens.len() {
            // Re-sum from scratch so rounding drift stays bounded.
            self.sum = pairwise_row_sum(&self.rows, m);
            self.since_refresh = 0;
        }
    }

    fn residual(&self) -> Vec<f64> {
        self.model.residual_of(&self.predictor()).0
    }

    fn snapshot(&self, recorder: &Recorder, step: u64, time: f64) -> crate::record::Snapshot {
        let f = self.model.predictor(&self.ens).expect("checked ensemble");
        let loss = self.model.residual_of(&f).loss();
        recorder.snapshot_with(&self.ens, step, time, f, loss)
    }
}

/// Mean-field jump process: each particle jumps at the times of its own
/// exponential clock by `-alpha grad V[mu_{t-}](x)`.
pub fn ctsjump_simulate(
    model: &Model,
    init: &ParticleEnsemble,
    alpha: f64,
    horizon: f64,
    scheme: JumpScheme,
    seed: u64,
    recorder: &Recorder,
) -> Result<JumpRun> {
    model.check_ensemble(init)?;
    check_positive("alpha", alpha)?;
    check_positive("horizon", horizon)?;
    let n = init.len();
    let mut record = recorder.start(model, init);
    record.set_meta("phase", "III");
    record.set_meta("alpha", alpha);
    record.set_meta("scheme", scheme);
    record.set_meta("seed", seed);
    let grid = grid_times(recorder, horizon, horizon);
    let mut state = JumpState::new(model, init.clone());
    let mut counts = vec![0u32; n];
    let mut next_grid = 0;
    match scheme {
        JumpScheme::EventDriven => {
            let clock = JumpClock::new(alpha, seed)?;
            let mut rngs: Vec<ChaCha8Rng> = (0..n).map(|i| clock.particle_rng(i)).collect();
            let mut heap: BinaryHeap<Event> = (0..n)
                .map(|i| Event {
                    time: clock.gap(&mut rngs[i]),
                    particle: i,
                })
                .collect();
            let mut events = 0u64;
            while let Some(ev) = heap.pop() {
                while next_grid < grid.len() && grid[next_grid] < ev.time {
                    record.push(state.snapshot(recorder, events, grid[next_grid]));
                    next_grid += 1;
                }
                if ev.time > horizon {
                    break;
                }
                let r = state.residual();
                state.jump(ev.particle, &r, alpha, 0.0);
                if state.ens.particle(ev.particle).iter().any(|v| !v.is_finite()) {
                    return Err(Error::NumericalAbort {
                        step: events,
                        particle: ev.particle,
                    });
                }
                counts[ev.particle] += 1;
                events += 1;
                let gap = clock.gap(&mut rngs[ev.particle]);
                heap.push(Event {
                    time: ev.time + gap,
                    particle: ev.particle,
                });
            }
        }
        JumpScheme::Thinning { dt } => {
            check_positive("dt", dt)?;
            if dt >= alpha {
                return Err(Error::param(format!(
                    "thinning tick {dt} must be smaller than alpha = {alpha}"
                )));
            }
            let prob = dt / alpha;
            let ticks = (horizon / dt + 1e-9).floor() as u64;
            record.push(state.snapshot(recorder, 0, 0.0));
            next_grid = 1;
            for k in 1..=ticks {
                let mut rng = rng::stream(seed, domain::THINNING, k);
                let movers: Vec<usize> = (0..n).filter(|_| unit_f64(&mut rng) < prob).collect();
                // All jumps of a tick see the state at the start of the tick;
                // a jump only reads its own position, so order is irrelevant.
                let r = state.residual();
                for &i in &movers {
                    state.jump(i, &r, alpha, 0.0);
                    counts[i] += 1;
                }
                if let Some(particle) = state.ens.first_non_finite() {
                    return Err(Error::NumericalAbort { step: k, particle });
                }
                let t = k as f64 * dt;
                while next_grid < grid.len() && grid[next_grid] <= t + 1e-12 {
                    record.push(state.snapshot(recorder, k, grid[next_grid]));
                    next_grid += 1;
                }
            }
        }
    }
    while next_grid < grid.len() {
        record.push(state.snapshot(recorder, 0, grid[next_grid]));
        next_grid += 1;
    }
    Ok(JumpRun {
        record,
        final_state: state.ens,
        jump_counts: counts,
    })
}

/// Draw of the random measure `M = beta sum_{i<=N} delta_{Z_i}` with
/// `N ~ Poisson(1/beta)` and `Z_i` drawn with replacement; returns `N` and
/// the predictor `f(M) = beta sum phi(Z_i)`.
pub fn sample_critical_predictor(
    model: &Model,
    ens: &ParticleEnsemble,
    beta: f64,
    rng: &mut impl Rng,
) -> Result<(u64, Vec<f64>)> {
    check_positive("beta", beta)?;
    let poisson = Poisson::new(1.0 / beta).map_err(|e| Error::param(e.to_string()))?;
    let count = poisson.sample(rng) as u64;
    let mut f = vec![0.0; model.samples()];
    for _ in 0..count {
        let j = rng.random_range(0..ens.len());
        let phi = model.features(ens.particle(j))?;
        f.iter_mut().zip(&phi).for_each(|(a, b)| *a += beta * b);
    }
    Ok((count, f))
}

/// New position of `x` after one critical jump: `x - alpha grad V[M](x) -
/// alpha beta grad P(x)`.
pub fn critical_displacement(
    model: &Model,
    ens: &ParticleEnsemble,
    x: &[f64],
    alpha: f64,
    beta: f64,
    rng: &mut impl Rng,
) -> Result<(Vec<f64>, u64)> {
    check_positive("alpha", alpha)?;
    let (count, f) = sample_critical_predictor(model, ens, beta, rng)?;
    let r: Vec<f64> = f.iter().zip(model.data().targets()).map(|(a, y)| a - y).collect();
    let g = model.vjp(x, &r)?;
    let gp = model.penalty_grad(x)?;
    let moved = x
        .iter()
        .zip(g.iter().zip(&gp))
        .map(|(xk, (gk, pk))| xk - alpha * gk - alpha * beta * pk)
        .collect();
    Ok((moved, count))
}

/// Picks a uniformly random particle and applies one critical jump to it.
pub fn critical_jump(
    model: &Model,
    ens: &ParticleEnsemble,
    alpha: f64,
    beta: f64,
    rng: &mut impl Rng,
) -> Result<(usize, Vec<f64>)> {
    model.check_ensemble(ens)?;
    let i = rng.random_range(0..ens.len());
    let (moved, _) = critical_displacement(model, ens, ens.particle(i), alpha, beta, rng)?;
    Ok((i, moved))
}

/// Event-driven simulation of the critical kernel: a global clock of rate
/// `n / alpha` and a uniformly chosen jumping particle.
pub fn critical_simulate(
    model: &Model,
    init: &ParticleEnsemble,
    alpha: f64,
    beta: f64,
    horizon: f64,
    seed: u64,
    recorder: &Recorder,
) -> Result<JumpRun> {
    model.check_ensemble(init)?;
    check_positive("alpha", alpha)?;
    check_positive("horizon", horizon)?;
    let n = init.len();
    let mut record = recorder.start(model, init);
    record.set_meta("phase", "IV");
    record.set_meta("alpha", alpha);
    record.set_meta("beta", beta);
    let grid = grid_times(recorder, horizon, horizon);
    let mut next_grid = 0;
    let mut ens = init.clone();
    let mut counts = vec![0u32; n];
    let mut rng = rng::stream(seed, domain::CRITICAL, 0);
    let rate_mean = alpha / n as f64;
    let mut t = 0.0;
    let mut events = 0u64;
    loop {
        t += -rate_mean * (1.0 - unit_f64(&mut rng)).ln();
        while next_grid < grid.len() && grid[next_grid] < t {
            record.push(recorder.snapshot(model, &ens, events, grid[next_grid])?);
            next_grid += 1;
        }
        if t > horizon {
            break;
        }
        let (i, moved) = critical_jump(model, &ens, alpha, beta, &mut rng)?;
        if moved.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalAbort { step: events, particle: i });
        }
        ens.particle_mut(i).copy_from_slice(&moved);
        counts[i] += 1;
        events += 1;
    }
    Ok(JumpRun {
        record,
        final_state: ens,
        jump_counts: counts,
    })
}

/// Mean part `b_n(mu, x)` of a stochastic-approximation scheme.
pub trait Drift {
    /// Row-major `n x p` drift at every particle.
    fn drift(&self, ens: &ParticleEnsemble) -> Result<Vec<f64>>;
}

/// Martingale-difference part `gamma_{k+1}` of a stochastic-approximation scheme.
pub trait Noise {
    fn sample(&mut self, step: u64, ens: &ParticleEnsemble) -> Result<Vec<f64>>;
}

/// `-grad V - beta grad P`.
pub struct GradientDrift<'a> {
    pub model: &'a Model,
    pub beta: f64,
}

impl Drift for GradientDrift<'_> {
    fn drift(&self, ens: &ParticleEnsemble) -> Result<Vec<f64>> {
        velocity(self.model, ens, self.beta)
    }
}

impl<'a> GradientDrift<'a> {
    /// Drift of GD-dropout: `-grad V - ((1 - q)/(n q)) grad P`.
    pub fn dropout(model: &'a Model, q: f64, n: usize) -> Self {
        Self {
            model,
            beta: (1.0 - q) / (n as f64 * q),
        }
    }
}

pub struct ZeroNoise;

impl Noise for ZeroNoise {
    fn sample(&mut self, _step: u64, ens: &ParticleEnsemble) -> Result<Vec<f64>> {
        Ok(vec![0.0; ens.as_flat().len()])
    }
}

/// Centered fluctuation of the dropout update around its drift:
/// `-tau eta^i grad V - tau ((eta^i)^2 - E eta^2)/n grad P
///  - (tau/n) sum_j eta^j Dphi^T phi^j - (tau eta^i/n) sum_{j != i} eta^j Dphi^T phi^j`.
pub struct DropoutNoise<'a> {
    pub model: &'a Model,
    pub masks: MaskStream,
    pub tau: f64,
}

impl DropoutNoise<'_> {
    pub fn with_row(&self, ens: &ParticleEnsemble, row: &MaskRow) -> Result<Vec<f64>> {
        let model = self.model;
        let n = ens.len();
        let nf = n as f64;
        let m = model.samples();
        let p = model.param_dim();
        let tau = self.tau;
        let q = row.q();
        let second = (1.0 - q) / q;
        let eta = row.eta();
        let r = model.residual(ens)?.0;
        let s = model.weighted_predictor(ens, |j| eta[j])?;
        let mut out = vec![0.0; n * p];
        for (i, o) in out.chunks_exact_mut(p).enumerate() {
            let x = ens.particle(i);
            let mut h = vec![0.0; m];
            model.activations_into(x, &mut h);
            let mut phi = vec![0.0; m];
            model.features_from_activations(x, &h, &mut phi);
            let others: Vec<f64> = s.iter().zip(&phi).map(|(sj, fj)| sj - eta[i] * fj / nf).collect();
            let mut g = vec![0.0; p];
            model.vjp_from_activations(x, &h, &r, &mut g);
            let mut gp = vec![0.0; p];
            model.vjp_from_activations(x, &h, &phi, &mut gp);
            let mut gs = vec![0.0; p];
            model.vjp_from_activations(x, &h, &s, &mut gs);
            let mut go = vec![0.0; p];
            model.vjp_from_activations(x, &h, &others, &mut go);
            let e = eta[i];
            for k in 0..p {
                o[k] = -tau * e * g[k] - tau * (e * e - second) / nf * gp[k] - tau * gs[k]
                    - tau * e * go[k];
            }
        }
        Ok(out)
    }
}

impl Noise for DropoutNoise<'_> {
    fn sample(&mut self, step: u64, ens: &ParticleEnsemble) -> Result<Vec<f64>> {
        let row = self.masks.row(step, ens.len());
        self.with_row(ens, &row)
    }
}

/// `X_{k+1} = X_k + tau b(mu_k, X_k) + gamma_{k+1}` for `steps` steps.
pub fn stoch_approx_run(
    model: &Model,
    init: &ParticleEnsemble,
    drift: &dyn Drift,
    noise: &mut dyn Noise,
    tau: f64,
    steps: u64,
    recorder: &Recorder,
) -> Result<(TrajectoryRecord, ParticleEnsemble)> {
    check_positive("tau", tau)?;
    model.check_ensemble(init)?;
    let mut record = recorder.start(model, init);
    record.push(recorder.snapshot(model, init, 0, 0.0)?);
    let mut ens = init.clone();
    for k in 1..=steps {
        let b = drift.drift(&ens)?;
        let gamma = noise.sample(k, &ens)?;
        for ((x, bk), gk) in ens.as_flat_mut().iter_mut().zip(&b).zip(&gamma) {
            *x += tau * bk + gk;
        }
        if let Some(particle) = ens.first_non_finite() {
            return Err(Error::NumericalAbort { step: k, particle });
        }
        if recorder.records_step(k, steps) {
            record.push(recorder.snapshot(model, &ens, k, k as f64 * tau)?);
        }
    }
    Ok((record, ens))
}

/// Run length of a limit simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Horizon {
    Steps(u64),
    Time(f64),
}

/// Runs the limit simulator of `phase` from `init` (usually a wide
/// ensemble standing in for the limit measure). Phase I uses the masks of
/// `(seed, primary lane)` so it can share them with a finite run; phase III
/// uses the clocks of `seed`; phase II integrates with RK4 at step `flow_step`.
pub fn limit_reference(
    model: &Model,
    phase: &Phase,
    init: &ParticleEnsemble,
    seed: u64,
    horizon: Horizon,
    flow_step: f64,
    recorder: &Recorder,
) -> Result<(TrajectoryRecord, ParticleEnsemble)> {
    match (phase, horizon) {
        (Phase::DiscreteJump { q, alpha, .. }, Horizon::Steps(steps)) => {
            let masks = MaskStream::new(*q, seed)?;
            let mut record = recorder.start(model, init);
            record.set_meta("phase", "I");
            record.set_meta("alpha", alpha);
            record.set_meta("q", q);
            record.push(recorder.snapshot(model, init, 0, 0.0)?);
            let mut ens = init.clone();
            let n = ens.len();
            for k in 1..=steps {
                ens = discrete_jump_step(model, &ens, *alpha, &masks.row(k, n))?;
                if let Some(particle) = ens.first_non_finite() {
                    return Err(Error::NumericalAbort { step: k, particle });
                }
                if recorder.records_step(k, steps) {
                    record.push(recorder.snapshot(model, &ens, k, k as f64)?);
                }
            }
            Ok((record, ens))
        }
        (Phase::GradientFlow { beta }, Horizon::Time(t)) => {
            wgf_simulate(model, init, *beta, t, flow_step, Integrator::Rk4, recorder)
        }
        (Phase::ContinuousJump { alpha }, Horizon::Time(t)) => {
            let run = ctsjump_simulate(model, init, *alpha, t, JumpScheme::EventDriven, seed, recorder)?;
            Ok((run.record, run.final_state))
        }
        (Phase::Critical { alpha, beta }, Horizon::Time(t)) => {
            let run = critical_simulate(model, init, *alpha, *beta, t, seed, recorder)?;
            Ok((run.record, run.final_state))
        }
        (Phase::Degenerate { reason }, _) => Err(Error::Unsupported(format!(
            "degenerate schedule has no limit: {reason}"
        ))),
        (phase, horizon) => Err(Error::param(format!(
            "{phase} needs a {} horizon, got {horizon:?}",
            if matches!(phase, Phase::DiscreteJump { .. }) { "step" } else { "time" }
        ))),
    }
}
