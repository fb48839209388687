//! Synthetic teacher-student data and initial particle draws.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, FeatureKind, FeatureMap, Model, ParticleEnsemble};
use crate::rng::{self, domain};

/// Independent Gaussian initialization: variance `inner_var` on `(b, c)` and
/// `outer_var` on `a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitLaw {
    pub inner_var: f64,
    pub outer_var: f64,
}

impl InitLaw {
    /// Variance `1/d` on the inner layer and `1` on the outer weight.
    pub fn standard(input_dim: usize) -> Self {
        Self {
            inner_var: 1.0 / input_dim as f64,
            outer_var: 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        for v in [self.inner_var, self.outer_var] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::param(format!("init variance must be >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Particle `i` of the stream `(seed, domain)`.
    fn draw(&self, param_dim: usize, seed: u64, tag: u64, i: usize) -> Vec<f64> {
        let mut rng = rng::stream(seed, tag, i as u64);
        let (so, si) = (self.outer_var.sqrt(), self.inner_var.sqrt());
        (0..param_dim)
            .map(|k| {
                let g: f64 = StandardNormal.sample(&mut rng);
                if k == 0 {
                    so * g
                } else {
                    si * g
                }
            })
            .collect()
    }
}

/// `n` i.i.d. particles in `R^p`; particle `i` depends only on `(seed, i)`,
/// so smaller widths are prefixes of larger ones.
pub fn init_ensemble(n: usize, param_dim: usize, law: &InitLaw, seed: u64) -> Result<ParticleEnsemble> {
    if n == 0 {
        return Err(Error::param("ensemble width must be positive"));
    }
    law.validate()?;
    let flat = (0..n)
        .flat_map(|i| law.draw(param_dim, seed, domain::INIT, i))
        .collect();
    ParticleEnsemble::from_flat(param_dim, flat)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeacherSpec {
    pub input_dim: usize,
    pub teacher_width: usize,
    pub samples: usize,
    /// Standard deviation of Gaussian label noise.
    #[serde(default)]
    pub noise: f64,
}

impl TeacherSpec {
    /// Inputs in `R^20`, a width-15 teacher and 500 samples.
    pub fn reference() -> Self {
        Self {
            input_dim: 20,
            teacher_width: 15,
            samples: 500,
            noise: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.teacher_width == 0 || self.samples == 0 {
            return Err(Error::param("teacher dimensions must be positive"));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::param("label noise must be >= 0"));
        }
        Ok(())
    }
}

fn gaussian_inputs(spec: &TeacherSpec, seed: u64) -> Vec<f64> {
    (0..spec.samples)
        .flat_map(|j| {
            let mut rng = rng::stream(seed, domain::DATA, j as u64);
            (0..spec.input_dim)
                .map(move |_| StandardNormal.sample(&mut rng))
                .collect::<Vec<f64>>()
        })
        .collect()
}

/// Targets `(1/w) sum_k phi(teacher_k, z_j)` plus optional label noise.
pub fn teacher_targets(
    kind: FeatureKind,
    input_dim: usize,
    inputs: Vec<f64>,
    teacher: &ParticleEnsemble,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    let samples = inputs.len() / input_dim.max(1);
    let placeholder = Dataset::from_flat(input_dim, inputs, vec![0.0; samples])?;
    let model = Model::new(FeatureMap::new(kind, input_dim), placeholder)?;
    let mut y = model.predictor(teacher)?;
    if noise > 0.0 {
        let mut rng = rng::stream(seed, domain::DATA, u64::MAX);
        for v in &mut y {
            let g: f64 = StandardNormal.sample(&mut rng);
            *v += noise * g;
        }
    }
    let data = model.data();
    let flat = (0..samples).flat_map(|j| data.input(j).to_vec()).collect();
    Dataset::from_flat(input_dim, flat, y)
}

/// Gaussian inputs labelled by a freshly initialized teacher of the same
/// family, with mean-field output scaling.
pub fn gen_teacher_student(kind: FeatureKind, spec: &TeacherSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let law = InitLaw::standard(spec.input_dim);
    let p = spec.input_dim + 2;
    let flat = (0..spec.teacher_width)
        .flat_map(|i| law.draw(p, seed, domain::TEACHER, i))
        .collect();
    let teacher = ParticleEnsemble::from_flat(p, flat)?;
    teacher_targets(
        kind,
        spec.input_dim,
        gaussian_inputs(spec, seed),
        &teacher,
        spec.noise,
        seed,
    )
}

/// Teacher-student data labelled by a given teacher.
pub fn gen_with_teacher(
    kind: FeatureKind,
    spec: &TeacherSpec,
    teacher: &ParticleEnsemble,
    seed: u64,
) -> Result<Dataset> {
    spec.validate()?;
    if teacher.dim() != spec.input_dim + 2 {
        return Err(Error::dim("teacher dimension", spec.input_dim + 2, teacher.dim()));
    }
    teacher_targets(
        kind,
        spec.input_dim,
        gaussian_inputs(spec, seed),
        teacher,
        spec.noise,
        seed,
    )
}
