//! Statistical and structural properties of the finite-width dropout step.

use dropphase_core::finite::{self, decompose_update, dropout_step, pn_ram_step, sharpness_stats, UpdateTerms};
use dropphase_core::rng::{self, domain, lane};
use dropphase_core::*;
use proptest::prelude::*;
use rand::Rng;

fn instance(n: usize, seed: u64) -> (Model, ParticleEnsemble) {
    let (d, m) = (3, 6);
    let mut rng = rng::stream(seed, domain::MONTE_CARLO, 9);
    let inputs: Vec<f64> = (0..m * d).map(|_| rng.random_range(-1.5..1.5)).collect();
    let targets: Vec<f64> = (0..m).map(|_| rng.random_range(-0.5..0.5)).collect();
    let data = Dataset::from_flat(d, inputs, targets).unwrap();
    let model = Model::new(FeatureMap::new(FeatureKind::BoundedSmooth, d), data).unwrap();
    let flat = (0..n * (d + 2)).map(|_| rng.random_range(-1.0..1.0)).collect();
    (model, ParticleEnsemble::from_flat(d + 2, flat).unwrap())
}

/// Monte Carlo mean of one field of the decomposition over `draws` steps,
/// with a standard error per coordinate.
fn term_mean(
    model: &Model,
    ens: &ParticleEnsemble,
    q: f64,
    tau: f64,
    draws: u64,
    pick: impl Fn(&UpdateTerms) -> &Vec<f64>,
) -> (Vec<f64>, Vec<f64>) {
    let primary = MaskStream::new(q, 17).unwrap();
    let tilde = primary.with_lane(lane::TILDE);
    let n = ens.len();
    let cols: Vec<Vec<f64>> = (1..=draws)
        .map(|k| {
            let terms = decompose_update(model, ens, &primary.row(k, n), &tilde.row(k, n), tau).unwrap();
            terms.iter().flat_map(|t| pick(t).clone()).collect()
        })
        .collect();
    let len = cols[0].len();
    let stats: Vec<(f64, f64)> = (0..len)
        .map(|c| numeric::mean_and_stderr(&cols.iter().map(|v| v[c]).collect::<Vec<f64>>()))
        .collect();
    stats.into_iter().unzip()
}

#[test]
fn mask_moments_match_keep_rate() {
    for q in [0.2, 0.6] {
        let eta = MaskStream::new(q, 5).unwrap().row(3, 400_000).eta().to_vec();
        let (mean, se) = numeric::mean_and_stderr(&eta);
        assert!(mean.abs() < 4.0 * se, "q={q}: mean {mean}");
        let second = eta.iter().map(|e| e * e).sum::<f64>() / eta.len() as f64;
        assert!((second * q / (1.0 - q) - 1.0).abs() < 0.02);
        // The only two values a mask can take.
        assert!(eta.iter().all(|&e| e == -1.0 || e == (1.0 - q) / q));
    }
}

#[test]
fn masks_do_not_depend_on_draw_order() {
    let s = MaskStream::new(0.4, 8).unwrap();
    let forward: Vec<MaskRow> = (0..20).map(|k| s.row(k, 50)).collect();
    for k in (0..20).rev() {
        assert_eq!(s.row(k, 50).eta(), forward[k as usize].eta());
    }
}

#[test]
fn propagation_noise_is_mean_zero() {
    let (model, ens) = instance(12, 1);
    let (mean, se) = term_mean(&model, &ens, 0.5, 0.3, 4000, |t| &t.propagation_noise);
    for (m, s) in mean.iter().zip(&se) {
        assert!(m.abs() <= 4.5 * s, "{m} vs se {s}");
    }
}

#[test]
fn penalty_term_mean_is_scaled_penalty_gradient() {
    let (model, ens) = instance(12, 2);
    let (q, tau) = (0.4, 0.3);
    let n = ens.len() as f64;
    let (mean, se) = term_mean(&model, &ens, q, tau, 4000, |t| &t.penalty);
    let expected: Vec<f64> = ens
        .iter()
        .flat_map(|x| model.penalty_grad(x).unwrap())
        .map(|g| -tau * (1.0 - q) / (n * q) * g)
        .collect();
    for ((m, s), e) in mean.iter().zip(&se).zip(&expected) {
        assert!((m - e).abs() <= 4.5 * s + 1e-15, "{m} vs {e} (se {s})");
    }
}

#[test]
fn sharpness_expansion_has_cubic_remainder() {
    let (model, ens) = instance(16, 3);
    let stats = sharpness_stats(&model, &ens, 1.0, 1.0).unwrap();
    let l0 = model.loss(&ens).unwrap();
    let r = model.residual(&ens).unwrap();
    let remainder = |h: f64| {
        let flat: Vec<f64> = ens
            .iter()
            .flat_map(|x| {
                let g = model.potential_grad_with(&r, x).unwrap();
                x.iter().zip(g).map(|(v, gk)| v - h * gk).collect::<Vec<f64>>()
            })
            .collect();
        let moved = ParticleEnsemble::from_flat(ens.dim(), flat).unwrap();
        let predicted = -h * stats.a / 2.0 + h * h * (stats.b + stats.c);
        (model.loss(&moved).unwrap() - l0 - predicted).abs()
    };
    let ratio = remainder(0.04) / remainder(0.02);
    assert!((6.0..10.0).contains(&ratio), "error ratio {ratio}");
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let (model, ens) = instance(300, 4);
    let cfg = StepConfig::new(0.2, 0.5, Variant::PnRam).unwrap();
    let rec = Recorder::every_step(3);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| {
                let (_, last) = finite::run(&model, &ens, &cfg, 2, 15, &rec).unwrap();
                let stats = sharpness_stats(&model, &last, 1.0, 2.0).unwrap();
                (last, stats)
            })
    };
    assert_eq!(run(1), run(4));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pn_ram_with_shared_masks_is_dropout(seed in 0u64..1000, n in 1usize..40, q in 0.05f64..1.0, tau in 0.01f64..1.0) {
        let (model, ens) = instance(n, seed);
        let row = MaskStream::new(q, seed).unwrap().row(1, n);
        let a = dropout_step(&model, &ens, &row, tau).unwrap();
        let b = pn_ram_step(&model, &ens, &row, &row, tau).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn decomposition_sums_to_dropout_increment(seed in 0u64..1000, n in 1usize..40, q in 0.05f64..1.0, tau in 0.01f64..1.0) {
        let (model, ens) = instance(n, seed);
        let row = MaskStream::new(q, seed).unwrap().row(1, n);
        let next = dropout_step(&model, &ens, &row, tau).unwrap();
        let terms = decompose_update(&model, &ens, &row, &row.detached(), tau).unwrap();
        for (i, t) in terms.iter().enumerate() {
            let x = ens.particle(i);
            let scale = 1.0 + numeric::norm(x);
            for (k, d) in t.sum().iter().enumerate() {
                prop_assert!((x[k] + d - next.particle(i)[k]).abs() <= 1e-12 * scale);
            }
        }
    }
}
