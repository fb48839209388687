//! Fixtures shared by the benchmarks in `benches/`.

use dropphase_core::harness::{gen_teacher_student, init_ensemble, InitLaw, TeacherSpec};
use dropphase_core::{FeatureKind, FeatureMap, Model, ParticleEnsemble};

/// Smooth teacher-student problem with `samples` points in `R^input_dim`
/// and `n` particles drawn from the standard law.
pub fn fixture(input_dim: usize, samples: usize, n: usize) -> (Model, ParticleEnsemble) {
    let spec = TeacherSpec {
        input_dim,
        teacher_width: 4,
        samples,
        noise: 0.0,
    };
    let data = gen_teacher_student(FeatureKind::BoundedSmooth, &spec, 0).expect("valid teacher");
    let model = Model::new(FeatureMap::new(FeatureKind::BoundedSmooth, input_dim), data).expect("valid model");
    (model, cloud(input_dim, n, 1))
}

/// `n` standard-law particles for input dimension `input_dim`.
pub fn cloud(input_dim: usize, n: usize, seed: u64) -> ParticleEnsemble {
    init_ensemble(n, input_dim + 2, &InitLaw::standard(input_dim), seed).expect("valid law")
}

#[cfg(test)]
mod tests {
    #[test]
    fn fixture_shapes() {
        let (model, ens) = super::fixture(5, 8, 16);
        assert_eq!(model.param_dim(), 7);
        assert_eq!(ens.len(), 16);
    }
}
