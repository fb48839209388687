//! Finite-width discrete-time dynamics: GD with dropout and its relatives.
//!
//! Every variant is an instance of one kernel
//!
//! ```text
//! x^i <- x^i - tau * b^i * Dphi(x^i)^T ((1/n) sum_j w^j phi(x^j) - y + beta phi(x^i))
//! ```
//!
//! with forward weights `w^j` (masked predictor) and backward factors `b^i`.
//! Dropout uses `w = b = 1 + eta`, RaM uses `w = 1`, propagation noise uses
//! `b = 1`, and the PN+RaM variant draws `w` and `b` from independent lanes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ParticleEnsemble};
use crate::numeric::{norm, pairwise_row_sum, pairwise_sum};
use crate::record::{Recorder, TrajectoryRecord};
use crate::rng::{check_keep_rate, lane, MaskRow, MaskSource, MaskStream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Variant {
    Dropout,
    /// Masks applied after an unmasked forward pass.
    Ram,
    /// Masks in the forward pass only.
    PropagationNoise,
    /// Independent forward and backward masks.
    PnRam,
    PlainGd,
    ExplicitPenalty { beta: f64 },
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Dropout => "dropout",
            Variant::Ram => "ram",
            Variant::PropagationNoise => "pn",
            Variant::PnRam => "pn-ram",
            Variant::PlainGd => "plain-gd",
            Variant::ExplicitPenalty { .. } => "explicit-penalty",
        }
    }

    pub fn uses_masks(&self) -> bool {
        !matches!(self, Variant::PlainGd | Variant::ExplicitPenalty { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepConfig {
    pub tau: f64,
    pub q: f64,
    pub variant: Variant,
}

impl StepConfig {
    pub fn new(tau: f64, q: f64, variant: Variant) -> Result<Self> {
        let cfg = Self { tau, q, variant };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::param(format!("learning rate must be positive, got {}", self.tau)));
        }
        check_keep_rate(self.q)?;
        if let Variant::ExplicitPenalty { beta } = self.variant {
            if !(beta.is_finite() && beta >= 0.0) {
                return Err(Error::param(format!("penalty weight must be >= 0, got {beta}")));
            }
        }
        Ok(())
    }

    pub fn with_variant(self, variant: Variant) -> Self {
        Self { variant, ..self }
    }
}

fn check_row(row: &MaskRow, n: usize) -> Result<()> {
    if row.len() != n {
        return Err(Error::dim("mask row", n, row.len()));
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<()> {
    if tau.is_finite() && tau > 0.0 {
        Ok(())
    } else {
        Err(Error::param(format!("learning rate must be positive, got {tau}")))
    }
}

/// Per-particle increments `-scale_i (Dphi^T (f_w - y) + beta grad P)` of the
/// generic kernel, row-major `n x p`, together with the weighted predictor.
/// Particles with zero forward weight are never evaluated in the forward pass
/// and particles with zero scale are left with a zero increment.
pub(crate) fn kernel_increments(
    model: &Model,
    ens: &ParticleEnsemble,
    forward: impl Fn(usize) -> f64 + Sync,
    scale: impl Fn(usize) -> f64 + Sync,
    beta: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = ens.len();
    let m = model.samples();
    let p = model.param_dim();
    let rows = model.weighted_feature_rows(ens, &forward);
    let mut f = pairwise_row_sum(&rows, m);
    f.iter_mut().for_each(|v| *v /= n as f64);
    let r = model.residual_of(&f).0;
    let mut inc = vec![0.0; n * p];
    inc.par_chunks_mut(p).enumerate().for_each(|(i, out)| {
        let s = scale(i);
        if s == 0.0 {
            return;
        }
        let x = ens.particle(i);
        let mut h = vec![0.0; m];
        model.activations_into(x, &mut h);
        let mut g = vec![0.0; p];
        model.vjp_from_activations(x, &h, &r, &mut g);
        if beta != 0.0 {
            let mut phi = vec![0.0; m];
            model.features_from_activations(x, &h, &mut phi);
            let mut gp = vec![0.0; p];
            model.vjp_from_activations(x, &h, &phi, &mut gp);
            for (a, b) in g.iter_mut().zip(&gp) {
                *a += beta * b;
            }
        }
        for (o, gk) in out.iter_mut().zip(&g) {
            *o = -(s * gk);
        }
    });
    (inc, f)
}

fn apply(
    ens: &ParticleEnsemble,
    inc: &[f64],
    moved: impl Fn(usize) -> bool,
) -> ParticleEnsemble {
    let mut next = ens.clone();
    let p = ens.dim();
    for (i, (x, d)) in next
        .as_flat_mut()
        .chunks_exact_mut(p)
        .zip(inc.chunks_exact(p))
        .enumerate()
    {
        if moved(i) {
            for (xk, dk) in x.iter_mut().zip(d) {
                *xk += dk;
            }
        }
    }
    next
}

fn masked_step(
    model: &Model,
    ens: &ParticleEnsemble,
    tau: f64,
    forward: Option<&MaskRow>,
    backward: Option<&MaskRow>,
    beta: f64,
) -> Result<ParticleEnsemble> {
    model.check_ensemble(ens)?;
    check_tau(tau)?;
    let n = ens.len();
    for row in forward.iter().chain(backward.iter()) {
        check_row(row, n)?;
    }
    let scale = |i: usize| tau * backward.map_or(1.0, |r| r.factor(i));
    let (inc, _) = kernel_increments(
        model,
        ens,
        |i| forward.map_or(1.0, |r| r.factor(i)),
        scale,
        beta,
    );
    Ok(apply(ens, &inc, |i| scale(i) != 0.0))
}

/// One GD-dropout step: masked forward pass, masked and rescaled backward.
pub fn dropout_step(
    model: &Model,
    ens: &ParticleEnsemble,
    masks: &MaskRow,
    tau: f64,
) -> Result<ParticleEnsemble> {
    masked_step(model, ens, tau, Some(masks), Some(masks), 0.0)
}

/// Random-metric step: unmasked forward pass, masked backward.
pub fn ram_step(
    model: &Model,
    ens: &ParticleEnsemble,
    masks: &MaskRow,
    tau: f64,
) -> Result<ParticleEnsemble> {
    masked_step(model, ens, tau, None, Some(masks), 0.0)
}

/// Propagation-noise step: masked forward pass, every particle moves.
pub fn pn_step(
    model: &Model,
    ens: &ParticleEnsemble,
    masks: &MaskRow,
    tau: f64,
) -> Result<ParticleEnsemble> {
    masked_step(model, ens, tau, Some(masks), None, 0.0)
}

/// Forward and backward masks from independent rows.
pub fn pn_ram_step(
    model: &Model,
    ens: &ParticleEnsemble,
    forward: &MaskRow,
    backward: &MaskRow,
    tau: f64,
) -> Result<ParticleEnsemble> {
    masked_step(model, ens, tau, Some(forward), Some(backward), 0.0)
}

pub fn plain_gd_step(model: &Model, ens: &ParticleEnsemble, tau: f64) -> Result<ParticleEnsemble> {
    masked_step(model, ens, tau, None, None, 0.0)
}

/// GD on `L + (beta/n) sum P(x^i)` with the mean-field prefactor `n`.
pub fn explicit_penalty_step(
    model: &Model,
    ens: &ParticleEnsemble,
    tau: f64,
    beta: f64,
) -> Result<ParticleEnsemble> {
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(Error::param(format!("penalty weight must be >= 0, got {beta}")));
    }
    masked_step(model, ens, tau, None, None, beta)
}

/// Mask rows for one step of a variant.
#[derive(Debug, Clone)]
pub struct StepMasks {
    pub primary: MaskRow,
    /// Forward-pass row for PN+RaM.
    pub forward: Option<MaskRow>,
}

/// Dispatches one step of `cfg.variant`.
pub fn step(
    model: &Model,
    ens: &ParticleEnsemble,
    cfg: &StepConfig,
    masks: &StepMasks,
) -> Result<ParticleEnsemble> {
    let tau = cfg.tau;
    match cfg.variant {
        Variant::Dropout => dropout_step(model, ens, &masks.primary, tau),
        Variant::Ram => ram_step(model, ens, &masks.primary, tau),
        Variant::PropagationNoise => pn_step(model, ens, &masks.primary, tau),
        Variant::PnRam => {
            let fwd = masks
                .forward
                .as_ref()
                .ok_or_else(|| Error::param("PN+RaM needs a forward mask row"))?;
            pn_ram_step(model, ens, fwd, &masks.primary, tau)
        }
        Variant::PlainGd => plain_gd_step(model, ens, tau),
        Variant::ExplicitPenalty { beta } => explicit_penalty_step(model, ens, tau, beta),
    }
}

/// The four parts of one dropout increment for a single particle.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateTerms {
    pub no_dropout: Vec<f64>,
    pub propagation_noise: Vec<f64>,
    pub ram: Vec<f64>,
    pub penalty: Vec<f64>,
}

impl UpdateTerms {
    pub fn sum(&self) -> Vec<f64> {
        (0..self.no_dropout.len())
            .map(|k| self.no_dropout[k] + self.propagation_noise[k] + self.ram[k] + self.penalty[k])
            .collect()
    }
}

/// Splits the dropout increment into gradient, propagation noise, random
/// metric and penalty parts, using an independent mask copy `masks_tilde`
/// for the cross terms.
pub fn decompose_update(
    model: &Model,
    ens: &ParticleEnsemble,
    masks: &MaskRow,
    masks_tilde: &MaskRow,
    tau: f64,
) -> Result<Vec<UpdateTerms>> {
    model.check_ensemble(ens)?;
    check_tau(tau)?;
    let n = ens.len();
    check_row(masks, n)?;
    check_row(masks_tilde, n)?;
    if let (Some(a), Some(b)) = (masks.key(), masks_tilde.key()) {
        if a == b {
            return Err(Error::StreamCollision {
                seed: a.seed,
                lane: a.lane,
                step: a.step,
            });
        }
    }
    let m = model.samples();
    let p = model.param_dim();
    let r = model.residual(ens)?.0;
    let eta = masks.eta();
    let eta_t = masks_tilde.eta();
    let noise = model.weighted_predictor(ens, |j| eta_t[j])?;
    let terms = (0..n)
        .into_par_iter()
        .map(|i| {
            let x = ens.particle(i);
            let mut h = vec![0.0; m];
            model.activations_into(x, &mut h);
            let mut g = vec![0.0; p];
            model.vjp_from_activations(x, &h, &r, &mut g);
            let mut gn = vec![0.0; p];
            model.vjp_from_activations(x, &h, &noise, &mut gn);
            let mut phi = vec![0.0; m];
            model.features_from_activations(x, &h, &mut phi);
            let mut gp = vec![0.0; p];
            model.vjp_from_activations(x, &h, &phi, &mut gp);
            let factor = masks.factor(i);
            let pen = tau * (eta[i] * eta_t[i] - eta[i] * eta[i]) / n as f64;
            UpdateTerms {
                no_dropout: g.iter().map(|v| -(tau * v)).collect(),
                propagation_noise: gn.iter().map(|v| -(tau * factor * v)).collect(),
                ram: g.iter().map(|v| -(tau * eta[i] * v)).collect(),
                penalty: gp.iter().map(|v| pen * v).collect(),
            }
        })
        .collect();
    Ok(terms)
}

/// Where a run gets its mask rows from.
pub struct MaskPlan<'a> {
    pub primary: &'a dyn MaskSource,
    pub forward: Option<&'a dyn MaskSource>,
}

/// Iterates `cfg.variant` for `steps` steps with masks from `(seed, lane)`
/// streams. PN+RaM draws its forward masks from a separate lane.
pub fn run(
    model: &Model,
    init: &ParticleEnsemble,
    cfg: &StepConfig,
    mask_seed: u64,
    steps: u64,
    recorder: &Recorder,
) -> Result<(TrajectoryRecord, ParticleEnsemble)> {
    let primary = MaskStream::new(cfg.q, mask_seed)?;
    let forward = primary.with_lane(lane::FORWARD);
    let plan = MaskPlan {
        primary: &primary,
        forward: Some(&forward),
    };
    run_with(model, init, cfg, &plan, steps, recorder)
}

/// [`run`] with caller-supplied mask sources. Step `k` (1-based) uses row `k`.
pub fn run_with(
    model: &Model,
    init: &ParticleEnsemble,
    cfg: &StepConfig,
    plan: &MaskPlan<'_>,
    steps: u64,
    recorder: &Recorder,
) -> Result<(TrajectoryRecord, ParticleEnsemble)> {
    cfg.validate()?;
    model.check_ensemble(init)?;
    let n = init.len();
    let mut record = recorder.start(model, init);
    record.set_meta("variant", cfg.variant);
    record.set_meta("tau", cfg.tau);
    record.set_meta("q", cfg.q);
    record.set_meta("n", n);
    record.push(recorder.snapshot(model, init, 0, 0.0)?);
    let mut ens = init.clone();
    for k in 1..=steps {
        let masks = if cfg.variant.uses_masks() {
            StepMasks {
                primary: plan.primary.row(k, n),
                forward: plan.forward.map(|f| f.row(k, n)),
            }
        } else {
            StepMasks {
                primary: MaskRow::unmasked(n),
                forward: None,
            }
        };
        ens = step(model, &ens, cfg, &masks)?;
        if let Some(particle) = ens.first_non_finite() {
            return Err(Error::NumericalAbort { step: k, particle });
        }
        if recorder.records_step(k, steps) {
            record.push(recorder.snapshot(model, &ens, k, k as f64 * cfg.tau)?);
        }
    }
    Ok((record, ens))
}

/// Quantities of the one-step loss expansion under a random learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SharpnessStats {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// `None` when `a = 0` or the mean rate vanishes.
    pub s: Option<f64>,
}

impl SharpnessStats {
    /// Rate at which `s` reaches one for a deterministic `eta`.
    pub fn eta_max(&self) -> Option<f64> {
        let bc = self.b + self.c;
        (bc > 0.0).then(|| self.a / bc)
    }

    /// `B / |C|`, reported but never asserted.
    pub fn b_over_c(&self) -> f64 {
        self.b / self.c.abs()
    }
}

/// `A = 2 r^T E[Dphi Dphi^T] r`, `B = 0.5 |E[Dphi Dphi^T r]|^2`,
/// `C = 0.5 r^T E[D^2 phi[g, g]]` with `g = Dphi^T r`, and
/// `S = (B E[eta]^2 + C E[eta^2]) / (A E[eta])`.
pub fn sharpness_stats(
    model: &Model,
    ens: &ParticleEnsemble,
    eta_mean: f64,
    eta_second: f64,
) -> Result<SharpnessStats> {
    model.check_ensemble(ens)?;
    let n = ens.len();
    let m = model.samples();
    let p = model.param_dim();
    let r = model.residual(ens)?.0;
    // Per particle: |g|^2, Dphi g and the second-derivative action.
    let parts: Vec<(f64, Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x = ens.particle(i);
            let g = model.vjp(x, &r).expect("checked dimensions");
            let jac = model.jacobian(x).expect("checked dimensions");
            let jg: Vec<f64> = (0..m)
                .map(|j| (0..p).map(|k| jac[(j, k)] * g[k]).sum())
                .collect();
            let gn = norm(&g);
            let mut curv = vec![0.0; m];
            if gn > 0.0 {
                let h = 1e-4 * (1.0 + norm(x));
                let shifted = |sign: f64| -> Vec<f64> {
                    let xs: Vec<f64> = x.iter().zip(&g).map(|(v, gk)| v + sign * h * gk / gn).collect();
                    let js = model.jacobian(&xs).expect("checked dimensions");
                    (0..m).map(|j| (0..p).map(|k| js[(j, k)] * g[k]).sum()).collect()
                };
                let plus = shifted(1.0);
                let minus = shifted(-1.0);
                for j in 0..m {
                    curv[j] = gn * (plus[j] - minus[j]) / (2.0 * h);
                }
            }
            (gn * gn, jg, curv)
        })
        .collect();
    let nf = n as f64;
    let g2: Vec<f64> = parts.iter().map(|t| t.0).collect();
    let a = 2.0 * pairwise_sum(&g2) / nf;
    let flat_jg: Vec<f64> = parts.iter().flat_map(|t| t.1.iter().copied()).collect();
    let mean_jg: Vec<f64> = pairwise_row_sum(&flat_jg, m).iter().map(|v| v / nf).collect();
    let b = 0.5 * mean_jg.iter().map(|v| v * v).sum::<f64>();
    let flat_curv: Vec<f64> = parts.iter().flat_map(|t| t.2.iter().copied()).collect();
    let mean_curv: Vec<f64> = pairwise_row_sum(&flat_curv, m).iter().map(|v| v / nf).collect();
    let c = 0.5 * r.iter().zip(&mean_curv).map(|(u, v)| u * v).sum::<f64>();
    let denom = a * eta_mean;
    let s = (denom != 0.0).then(|| (b * eta_mean * eta_mean + c * eta_second) / denom);
    Ok(SharpnessStats { a, b, c, s })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Dataset, FeatureKind, FeatureMap};
    use crate::rng::{self, domain};
    use rand::Rng;

    fn instance(kind: FeatureKind, n: usize, seed: u64) -> (Model, ParticleEnsemble) {
        let d = 3;
        let m = 5;
        let mut rng = rng::stream(seed, domain::MONTE_CARLO, 0);
        let inputs: Vec<f64> = (0..m * d).map(|_| rng.random_range(-1.5..1.5)).collect();
        let targets: Vec<f64> = (0..m).map(|_| rng.random_range(-0.5..0.5)).collect();
        let data = Dataset::from_flat(d, inputs, targets).unwrap();
        let model = Model::new(FeatureMap::new(kind, d), data).unwrap();
        let flat = (0..n * (d + 2)).map(|_| rng.random_range(-1.0..1.0)).collect();
        (model, ParticleEnsemble::from_flat(d + 2, flat).unwrap())
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
    }

    #[test]
    fn unit_keep_rate_is_plain_gd() {
        let (model, ens) = instance(FeatureKind::BoundedSmooth, 16, 1);
        let row = MaskStream::new(1.0, 4).unwrap().row(1, 16);
        let gd = plain_gd_step(&model, &ens, 0.3).unwrap();
        assert_eq!(dropout_step(&model, &ens, &row, 0.3).unwrap(), gd);
        assert_eq!(ram_step(&model, &ens, &row, 0.3).unwrap(), gd);
        assert_eq!(pn_step(&model, &ens, &row, 0.3).unwrap(), gd);
        assert_eq!(pn_ram_step(&model, &ens, &row, &row, 0.3).unwrap(), gd);
        assert_eq!(explicit_penalty_step(&model, &ens, 0.3, 0.0).unwrap(), gd);
    }

    #[test]
    fn fully_masked_step_is_a_no_op() {
        let (model, ens) = instance(FeatureKind::BoundedSmooth, 8, 2);
        let row = MaskRow::from_values(0.4, vec![-1.0; 8]).unwrap();
        assert_eq!(dropout_step(&model, &ens, &row, 0.5).unwrap(), ens);
        assert_eq!(ram_step(&model, &ens, &row, 0.5).unwrap(), ens);
    }

    #[test]
    fn single_particle_dropout_matches_expansion() {
        let (model, ens) = instance(FeatureKind::BoundedSmooth, 1, 3);
        let q = 0.25;
        let row = MaskRow::from_values(q, vec![(1.0 - q) / q]).unwrap();
        let tau = 0.1;
        let x = ens.particle(0);
        let phi = model.features(x).unwrap();
        let v: Vec<f64> = phi
            .iter()
            .zip(model.data().targets())
            .map(|(f, y)| f / q - y)
            .collect();
        let g = model.vjp(x, &v).unwrap();
        let expected: Vec<f64> = x.iter().zip(&g).map(|(xk, gk)| xk - tau / q * gk).collect();
        let got = dropout_step(&model, &ens, &row, tau).unwrap();
        assert!(close(got.particle(0), &expected, 1e-14));
    }

    #[test]
    fn ram_matches_mask_after_gradient() {
        let (model, ens) = instance(FeatureKind::BoundedSmooth, 12, 4);
        let row = MaskStream::new(0.5, 7).unwrap().row(3, 12);
        let tau = 0.2;
        let r = model.residual(&ens).unwrap();
        let got = ram_step(&model, &ens, &row, tau).unwrap();
        for i in 0..12 {
            let x = ens.particle(i);
            let g = model.potential_grad_with(&r, x).unwrap();
            let keep = if row.eta()[i] == -1.0 { 0.0 } else { 1.0 / 0.5 };
            let expected: Vec<f64> = x.iter().zip(&g).map(|(xk, gk)| xk - tau * keep * gk).collect();
            assert!(close(got.particle(i), &expected, 1e-14));
        }
    }

    #[test]
    fn pn_with_everything_dropped_pulls_toward_targets() {
        let (model, ens) = instance(FeatureKind::BoundedSmooth, 4, 5);
        let row = MaskRow::from_values(0.5, vec![-1.0; 4]).unwrap();
        let got = pn_step(&model, &ens, &row, 0.1).unwrap();
        let x = ens.particle(2);
        let g = model.vjp(x, model.data().targets()).unwrap();
        let expected: Vec<f64> = x.iter().zip(&g).map(|(xk, gk)| xk + 0.1 * gk).collect();
        assert!(close(got.particle(2), &expected, 1e-14));
    }

    #[test]
    fn same_masks_make_pn_ram_dropout() {
        let (model, ens) = instance(FeatureKind::BoundedSmooth, 40, 6);
        let row = MaskStream::new(0.3, 1).unwrap().row(9, 40);
        assert_eq!(
            pn_ram_step(&model, &ens, &row, &row, 0.4).unwrap(),
            dropout_step(&model, &ens, &row, 0.4).unwrap()
        );
    }

    #[test]
    fn pn_ram_matches_term_by_term_expansion() {
        let (model, ens) = instance(FeatureKind::BoundedSmooth, 10, 7);
        let fwd = MaskStream::new(0.6, 1).unwrap().with_lane(lane::FORWARD).row(2, 10);
        let bwd = MaskStream::new(0.6, 1).unwrap().row(2, 10);
        let tau = 0.3;
        let f = model.weighted_predictor(&ens, |j| fwd.factor(j)).unwrap();
        let r: Vec<f64> = f.iter().zip(model.data().targets()).map(|(a, b)| a - b).collect();
        let got = pn_ram_step(&model, &ens, &fwd, &bwd, tau).unwrap();
        for i in 0..10 {
            let x = ens.particle(i);
            let g = model.vjp(x, &r).unwrap();
            let expected: Vec<f64> =
                x.iter().zip(&g).map(|(xk, gk)| xk - tau * bwd.factor(i) * gk).collect();
            assert!(close(got.particle(i), &expected, 1e-14));
        }
    }

    #[test]
    fn penalty_step_with_zero_residual_is_penalty_descent() {
        let (model, ens) = instance(FeatureKind::BoundedSmooth, 6, 8);
        let f = model.predictor(&ens).unwrap();
        let data = Dataset::from_flat(3, (0..5).flat_map(|j| model.data().input(j).to_vec()).collect(), f).unwrap();
        let model = Model::new(*model.map(), data).unwrap();
        let got = explicit_penalty_step(&model, &ens, 0.1, 2.0).unwrap();
        for i in 0..6 {
            let x = ens.particle(i);
            let gp = model.penalty_grad(x).unwrap();
            let expected: Vec<f64> = x.iter().zip(&gp).map(|(xk, g)| xk - 0.1 * 2.0 * g).collect();
            assert!(close(got.particle(i), &expected, 1e-12));
        }
    }

    #[test]
    fn penalty_step_matches_finite_differences_of_penalized_loss() {
        let (model, ens) = instance(FeatureKind::BoundedSmooth, 5, 9);
        let beta = 0.7;
        let tau = 1e-3;
        let n = ens.len() as f64;
        let next = explicit_penalty_step(&model, &ens, tau, beta).unwrap();
        let objective = |theta: &[f64]| -> f64 {
            let e = ParticleEnsemble::from_flat(5, theta.to_vec()).unwrap();
            let pen: f64 = e.iter().map(|x| model.penalty(x).unwrap()).sum();
            model.loss(&e).unwrap() + beta / n * pen
        };
        let theta = ens.as_flat().to_vec();
        let h = 1e-6;
        for k in 0..theta.len() {
            let mut up = theta.clone();
            let mut down = theta.clone();
            up[k] += h;
            down[k] -= h;
            let fd = n * (objective(&up) - objective(&down)) / (2.0 * h);
            let step = (theta[k] - next.as_flat()[k]) / tau;
            assert!((fd - step).abs() <= 1e-6 * (1.0 + fd.abs()), "coordinate {k}: {fd} vs {step}");
        }
    }

    #[test]
    fn mask_row_length_is_checked() {
        let (model, ens) = instance(FeatureKind::BoundedSmooth, 8, 10);
        let row = MaskStream::new(0.5, 1).unwrap().row(1, 7);
        assert!(matches!(
            dropout_step(&model, &ens, &row, 0.1),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn decomposition_with_equal_masks_sums_to_the_increment() {
        let (model, ens) = instance(FeatureKind::BoundedSmooth, 32, 11);
        let row = MaskStream::new(0.4, 2).unwrap().row(1, 32);
        let copy = MaskRow::from_values(0.4, row.eta().to_vec()).unwrap();
        let tau = 0.25;
        let terms = decompose_update(&model, &ens, &row, &copy, tau).unwrap();
        let next = dropout_step(&model, &ens, &row, tau).unwrap();
        for (i, t) in terms.iter().enumerate() {
            assert!(t.penalty.iter().all(|&v| v == 0.0));
            let inc: Vec<f64> = next.particle(i).iter().zip(ens.particle(i)).map(|(a, b)| a - b).collect();
            assert!(close(&t.sum(), &inc, 1e-13), "particle {i}");
        }
    }

    #[test]
    fn decomposition_rejects_shared_stream() {
        let (model, ens) = instance(FeatureKind::BoundedSmooth, 4, 12);
        let row = MaskStream::new(0.4, 2).unwrap().row(1, 4);
        assert!(matches!(
            decompose_update(&model, &ens, &row, &row.clone(), 0.1),
            Err(Error::StreamCollision { .. })
        ));
    }

    #[test]
    fn decomposition_at_unit_keep_rate() {
        let (model, ens) = instance(FeatureKind::BoundedSmooth, 6, 13);
        let row = MaskStream::new(1.0, 2).unwrap().row(1, 6);
        let tilde = MaskStream::new(1.0, 2).unwrap().with_lane(lane::TILDE).row(1, 6);
        for t in decompose_update(&model, &ens, &row, &tilde, 0.1).unwrap() {
            for v in t.propagation_noise.iter().chain(&t.ram).chain(&t.penalty) {
                assert_eq!(v.abs(), 0.0);
            }
        }
    }

    #[test]
    fn run_with_zero_steps_records_initial_state_only() {
        let (model, ens) = instance(FeatureKind::BoundedSmooth, 8, 14);
        let cfg = StepConfig::new(0.1, 0.5, Variant::Dropout).unwrap();
        let (record, last) = run(&model, &ens, &cfg, 1, 0, &Recorder::every_step(2)).unwrap();
        assert_eq!(record.snapshots.len(), 1);
        assert_eq!(last, ens);
    }

    #[test]
    fn plain_gd_with_small_rate_descends() {
        let (model, ens) = instance(FeatureKind::BoundedSmooth, 16, 15);
        let cfg = StepConfig::new(1e-3, 1.0, Variant::PlainGd).unwrap();
        let (record, _) = run(&model, &ens, &cfg, 0, 100, &Recorder::every_step(0)).unwrap();
        for w in record.snapshots.windows(2) {
            assert!(w[1].loss < w[0].loss);
        }
    }

    #[test]
    fn runs_are_reproducible() {
        let (model, ens) = instance(FeatureKind::BoundedSmooth, 16, 16);
        let cfg = StepConfig::new(0.2, 0.5, Variant::PnRam).unwrap();
        let rec = Recorder::every_step(3);
        let a = run(&model, &ens, &cfg, 5, 20, &rec).unwrap();
        let b = run(&model, &ens, &cfg, 5, 20, &rec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_positions_abort() {
        let (model, _) = instance(FeatureKind::ReluStandard, 1, 17);
        let ens = ParticleEnsemble::from_flat(5, vec![1e300, 1e300, 1e300, 1e300, 1e300]).unwrap();
        let cfg = StepConfig::new(1e10, 1.0, Variant::PlainGd).unwrap();
        let err = run(&model, &ens, &cfg, 0, 5, &Recorder::default()).unwrap_err();
        assert!(matches!(err, Error::NumericalAbort { particle: 0, .. }));
    }

    #[test]
    fn sharpness_eta_max_sets_s_to_one() {
        let (model, ens) = instance(FeatureKind::BoundedSmooth, 10, 18);
        let probe = sharpness_stats(&model, &ens, 1.0, 1.0).unwrap();
        let eta = probe.eta_max().unwrap();
        let at = sharpness_stats(&model, &ens, eta, eta * eta).unwrap();
        assert!((at.s.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sharpness_is_undefined_at_zero_residual() {
        let (model, ens) = instance(FeatureKind::BoundedSmooth, 4, 19);
        let f = model.predictor(&ens).unwrap();
        let inputs = (0..5).flat_map(|j| model.data().input(j).to_vec()).collect();
        let model = Model::new(*model.map(), Dataset::from_flat(3, inputs, f).unwrap()).unwrap();
        let stats = sharpness_stats(&model, &ens, 1.0, 1.0).unwrap();
        assert_eq!(stats.a, 0.0);
        assert!(stats.s.is_none());
    }
}
