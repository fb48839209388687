//! Feature maps, datasets, particle ensembles and the closed-form calculus
//! of the squared loss in measure form.
//!
//! A parameter point is `x = (a, b, c)` with outer weight `a`, inner weights
//! `b` in `R^d` and bias `c`, so `p = d + 2`. The feature of `x` on input `z`
//! is `s(a) * sigma(b.z + c)` where `(s, sigma)` is `(tanh, tanh)` for the
//! bounded-smooth map and `(id, relu)` for the standard ReLU unit.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{dist, norm, pairwise_row_sum};
use crate::rng::{self, domain};
use crate::transport;

/// Training inputs `z_1..z_m` in `R^d` with scalar targets `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    input_dim: usize,
    inputs: Vec<f64>,
    targets: Vec<f64>,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, targets: Vec<f64>) -> Result<Self> {
        let input_dim = inputs.first().map(Vec::len).unwrap_or(0);
        for z in &inputs {
            if z.len() != input_dim {
                return Err(Error::dim("dataset input", input_dim, z.len()));
            }
        }
        Self::from_flat(input_dim, inputs.concat(), targets)
    }

    pub fn from_flat(input_dim: usize, inputs: Vec<f64>, targets: Vec<f64>) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::param("dataset needs at least one sample"));
        }
        if input_dim == 0 {
            return Err(Error::param("input dimension must be positive"));
        }
        if inputs.len() != input_dim * targets.len() {
            return Err(Error::dim(
                "dataset inputs",
                input_dim * targets.len(),
                inputs.len(),
            ));
        }
        if inputs.iter().chain(&targets).any(|v| !v.is_finite()) {
            return Err(Error::param("dataset contains non-finite values"));
        }
        Ok(Self {
            input_dim,
            inputs,
            targets,
        })
    }

    /// Number of samples `m`.
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn input(&self, j: usize) -> &[f64] {
        &self.inputs[j * self.input_dim..(j + 1) * self.input_dim]
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    /// Reads a CSV with header `z0,...,z{d-1},y`.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(file)
    }

    pub fn from_csv_reader(reader: impl std::io::Read) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        let d = headers.len().saturating_sub(1);
        for (k, h) in headers.iter().enumerate() {
            let expected = if k == d {
                "y".to_string()
            } else {
                format!("z{k}")
            };
            if h.trim() != expected {
                return Err(Error::param(format!(
                    "dataset header column {k} is '{h}', expected '{expected}'"
                )));
            }
        }
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for record in rdr.records() {
            let record = record?;
            for (k, field) in record.iter().enumerate() {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::param(format!("unparseable dataset value '{field}'")))?;
                if k == d {
                    targets.push(v);
                } else {
                    inputs.push(v);
                }
            }
        }
        Self::from_flat(d, inputs, targets)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.to_csv_writer(file)
    }

    pub fn to_csv_writer(&self, writer: impl std::io::Write) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..self.input_dim).map(|k| format!("z{k}")).collect();
        header.push("y".into());
        wtr.write_record(&header)?;
        for j in 0..self.len() {
            let mut row: Vec<String> = self.input(j).iter().map(|v| v.to_string()).collect();
            row.push(self.targets[j].to_string());
            wtr.write_record(&row)?;
        }
        wtr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    /// `tanh(a) * tanh(b.z + c)`: bounded with a bounded Lipschitz Jacobian.
    BoundedSmooth,
    /// `a * max(b.z + c, 0)`: the usual ReLU unit, outside the regularity
    /// class the limit theory needs.
    ReluStandard,
}

impl FeatureKind {
    /// Whether the map is bounded with a bounded, Lipschitz differential.
    pub fn satisfies_regularity(self) -> bool {
        matches!(self, FeatureKind::BoundedSmooth)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::BoundedSmooth => "bounded-smooth",
            FeatureKind::ReluStandard => "relu-standard",
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bounded-smooth" | "bounded_smooth" | "tanh" | "smooth" => Ok(Self::BoundedSmooth),
            "relu-standard" | "relu_standard" | "relu" => Ok(Self::ReluStandard),
            other => Err(Error::param(format!("unknown feature map '{other}'"))),
        }
    }
}

/// Sup-norm certificates, valid on a given dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundCertificate {
    /// `|phi_j(x)| <= phi_entry` for every sample `j`.
    pub phi_entry: f64,
    /// Operator-norm bound on `Dphi(x)` (also a Lipschitz constant of `phi`).
    pub jacobian: f64,
    /// Lipschitz constant of `x -> Dphi(x)` in operator norm.
    pub jacobian_lipschitz: f64,
}

/// `max |d/da (1 - tanh(a)^2)| = 4 / (3 sqrt 3)`.
const SECH2_SLOPE: f64 = 0.769_800_358_919_501;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMap {
    kind: FeatureKind,
    input_dim: usize,
}

impl FeatureMap {
    pub fn new(kind: FeatureKind, input_dim: usize) -> Self {
        Self { kind, input_dim }
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn param_dim(&self) -> usize {
        self.input_dim + 2
    }

    /// Certificates for `data`; `None` for the ReLU map, which has none.
    pub fn certificate(&self, data: &Dataset) -> Option<BoundCertificate> {
        if self.kind != FeatureKind::BoundedSmooth {
            return None;
        }
        let mut jac_sq = 0.0;
        let mut lip_sq = 0.0;
        for j in 0..data.len() {
            // Row j of Dphi has squared norm at most 1 + |z|^2; the Hessian of
            // phi_j is bounded entrywise by the sech^2 slope and |(z, 1)|.
            let zz = data.input(j).iter().map(|v| v * v).sum::<f64>() + 1.0;
            jac_sq += zz;
            let s2 = SECH2_SLOPE * SECH2_SLOPE;
            lip_sq += s2 + 2.0 * zz + s2 * zz * zz;
        }
        Some(BoundCertificate {
            phi_entry: 1.0,
            jacobian: jac_sq.sqrt(),
            jacobian_lipschitz: lip_sq.sqrt(),
        })
    }

    #[inline]
    fn outer(&self, a: f64) -> (f64, f64) {
        match self.kind {
            FeatureKind::BoundedSmooth => {
                let t = a.tanh();
                (t, 1.0 - t * t)
            }
            FeatureKind::ReluStandard => (a, 1.0),
        }
    }

    #[inline]
    fn activation(&self, u: f64) -> f64 {
        match self.kind {
            FeatureKind::BoundedSmooth => u.tanh(),
            FeatureKind::ReluStandard => u.max(0.0),
        }
    }

    /// Derivative of the activation expressed through its value.
    #[inline]
    fn activation_slope(&self, h: f64) -> f64 {
        match self.kind {
            FeatureKind::BoundedSmooth => 1.0 - h * h,
            FeatureKind::ReluStandard => {
                if h > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// `n` particles in `R^p`, read as the empirical measure `(1/n) sum delta_x`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    dim: usize,
    positions: Vec<f64>,
}

impl ParticleEnsemble {
    pub fn from_flat(dim: usize, positions: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::param("particle dimension must be positive"));
        }
        if positions.is_empty() || !positions.len().is_multiple_of(dim) {
            return Err(Error::dim("ensemble positions", dim, positions.len()));
        }
        if positions.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("ensemble contains non-finite positions"));
        }
        Ok(Self { dim, positions })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if let Some(r) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::dim("ensemble row", dim, r.len()));
        }
        Self::from_flat(dim, rows.concat())
    }

    /// `n` copies of one point.
    pub fn replicate(x: &[f64], n: usize) -> Result<Self> {
        Self::from_flat(x.len(), x.repeat(n))
    }

    pub fn len(&self) -> usize {
        self.positions.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn particle_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'_, f64> {
        self.positions.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.positions
    }

    pub(crate) fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.positions
    }

    /// First `n` particles.
    pub fn prefix(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.len() {
            return Err(Error::param(format!(
                "prefix of length {n} from an ensemble of {}",
                self.len()
            )));
        }
        Self::from_flat(self.dim, self.positions[..n * self.dim].to_vec())
    }

    /// Concatenation of two ensembles in the same space.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if other.dim != self.dim {
            return Err(Error::dim("ensemble concat", self.dim, other.dim));
        }
        let mut positions = self.positions.clone();
        positions.extend_from_slice(&other.positions);
        Self::from_flat(self.dim, positions)
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.iter().position(|x| x.iter().any(|v| !v.is_finite()))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut wtr = csv::Writer::from_path(path)?;
        let header: Vec<String> = (0..self.dim).map(|c| format!("x{c}")).collect();
        wtr.write_record(&header)?;
        for x in self.iter() {
            wtr.write_record(x.iter().map(|v| v.to_string()))?;
        }
        wtr.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut rdr = csv::Reader::from_path(path)?;
        let dim = rdr.headers()?.len();
        let mut positions = Vec::new();
        for record in rdr.records() {
            for field in record?.iter() {
                positions.push(field.trim().parse::<f64>().map_err(|_| {
                    Error::param(format!("unparseable position '{field}' in {}", path.display()))
                })?);
            }
        }
        Self::from_flat(dim, positions)
    }
}

/// `f(mu) - y`.
#[derive(Debug, Clone, PartialEq)]
pub struct Residual(pub Vec<f64>);

impl Residual {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn squared_norm(&self) -> f64 {
        self.0.iter().map(|r| r * r).sum()
    }

    /// Half the squared norm, i.e. the loss.
    pub fn loss(&self) -> f64 {
        0.5 * self.squared_norm()
    }
}

/// A feature map bound to its training set.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    map: FeatureMap,
    data: Dataset,
}

impl Model {
    pub fn new(map: FeatureMap, data: Dataset) -> Result<Self> {
        if map.input_dim() != data.input_dim() {
            return Err(Error::dim("feature map input", data.input_dim(), map.input_dim()));
        }
        Ok(Self { map, data })
    }

    pub fn map(&self) -> &FeatureMap {
        &self.map
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn kind(&self) -> FeatureKind {
        self.map.kind
    }

    pub fn param_dim(&self) -> usize {
        self.map.param_dim()
    }

    /// Number of training samples `m`.
    pub fn samples(&self) -> usize {
        self.data.len()
    }

    pub fn certificate(&self) -> Option<BoundCertificate> {
        self.map.certificate(&self.data)
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.param_dim() {
            return Err(Error::dim("parameter point", self.param_dim(), x.len()));
        }
        Ok(())
    }

    pub(crate) fn check_ensemble(&self, ens: &ParticleEnsemble) -> Result<()> {
        if ens.dim() != self.param_dim() {
            return Err(Error::dim("ensemble dimension", self.param_dim(), ens.dim()));
        }
        Ok(())
    }

    /// Hidden activations `sigma(b.z_j + c)` for every sample.
    pub(crate) fn activations_into(&self, x: &[f64], h: &mut [f64]) {
        let d = self.map.input_dim;
        let b = &x[1..=d];
        let c = x[d + 1];
        for (j, hj) in h.iter_mut().enumerate() {
            let z = self.data.input(j);
            let mut u = c;
            for k in 0..d {
                u += b[k] * z[k];
            }
            *hj = self.map.activation(u);
        }
    }

    pub(crate) fn features_from_activations(&self, x: &[f64], h: &[f64], out: &mut [f64]) {
        let (s, _) = self.map.outer(x[0]);
        for (o, &hj) in out.iter_mut().zip(h) {
            *o = s * hj;
        }
    }

    /// `Dphi(x)^T v` from cached activations.
    pub(crate) fn vjp_from_activations(&self, x: &[f64], h: &[f64], v: &[f64], out: &mut [f64]) {
        let d = self.map.input_dim;
        let (s, ds) = self.map.outer(x[0]);
        let mut da = 0.0;
        let mut dc = 0.0;
        out[1..=d].iter_mut().for_each(|o| *o = 0.0);
        for (j, (&hj, &vj)) in h.iter().zip(v).enumerate() {
            da += vj * hj;
            let w = vj * self.map.activation_slope(hj);
            if w != 0.0 {
                let z = self.data.input(j);
                for k in 0..d {
                    out[1 + k] += w * z[k];
                }
                dc += w;
            }
        }
        out[0] = ds * da;
        for o in &mut out[1..=d] {
            *o *= s;
        }
        out[d + 1] = s * dc;
    }

    /// `phi(x) = (phi(x, z_1), ..., phi(x, z_m))`.
    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_point(x)?;
        let mut h = vec![0.0; self.samples()];
        self.activations_into(x, &mut h);
        let mut out = vec![0.0; self.samples()];
        self.features_from_activations(x, &h, &mut out);
        Ok(out)
    }

    /// Closed-form `m x p` Jacobian. The ReLU kink uses the zero subgradient.
    pub fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check_point(x)?;
        let m = self.samples();
        let d = self.map.input_dim;
        let mut h = vec![0.0; m];
        self.activations_into(x, &mut h);
        let (s, ds) = self.map.outer(x[0]);
        let mut jac = DMatrix::zeros(m, self.param_dim());
        for j in 0..m {
            let z = self.data.input(j);
            let slope = self.map.activation_slope(h[j]);
            jac[(j, 0)] = ds * h[j];
            for k in 0..d {
                jac[(j, 1 + k)] = s * slope * z[k];
            }
            jac[(j, d + 1)] = s * slope;
        }
        Ok(jac)
    }

    /// `Dphi(x)^T v`.
    pub fn vjp(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        self.check_point(x)?;
        if v.len() != self.samples() {
            return Err(Error::dim("cotangent", self.samples(), v.len()));
        }
        let mut h = vec![0.0; self.samples()];
        self.activations_into(x, &mut h);
        let mut out = vec![0.0; self.param_dim()];
        self.vjp_from_activations(x, &h, v, &mut out);
        Ok(out)
    }

    /// Row-major `n x m` matrix of `weight_i * phi(x^i)`; rows with zero
    /// weight are left at zero without evaluating the features.
    pub(crate) fn weighted_feature_rows(
        &self,
        ens: &ParticleEnsemble,
        weight: impl Fn(usize) -> f64 + Sync,
    ) -> Vec<f64> {
        let m = self.samples();
        let mut rows = vec![0.0; ens.len() * m];
        rows.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
            let w = weight(i);
            if w != 0.0 {
                let x = ens.particle(i);
                self.activations_into(x, row);
                let (s, _) = self.map.outer(x[0]);
                let sw = s * w;
                row.iter_mut().for_each(|v| *v *= sw);
            }
        });
        rows
    }

    /// `(1/n) sum_i weight_i phi(x^i)` with pairwise summation.
    pub fn weighted_predictor(
        &self,
        ens: &ParticleEnsemble,
        weight: impl Fn(usize) -> f64 + Sync,
    ) -> Result<Vec<f64>> {
        self.check_ensemble(ens)?;
        let rows = self.weighted_feature_rows(ens, weight);
        let n = ens.len() as f64;
        let mut f = pairwise_row_sum(&rows, self.samples());
        f.iter_mut().for_each(|v| *v /= n);
        Ok(f)
    }

    /// `f(mu) = (1/n) sum_i phi(x^i)`.
    pub fn predictor(&self, ens: &ParticleEnsemble) -> Result<Vec<f64>> {
        self.weighted_predictor(ens, |_| 1.0)
    }

    pub fn residual_of(&self, predictor: &[f64]) -> Residual {
        Residual(
            predictor
                .iter()
                .zip(self.data.targets())
                .map(|(f, y)| f - y)
                .collect(),
        )
    }

    pub fn residual(&self, ens: &ParticleEnsemble) -> Result<Residual> {
        Ok(self.residual_of(&self.predictor(ens)?))
    }

    /// `L(mu) = 0.5 |f(mu) - y|^2`.
    pub fn loss(&self, ens: &ParticleEnsemble) -> Result<f64> {
        Ok(self.residual(ens)?.loss())
    }

    /// `grad V[mu](x) = Dphi(x)^T (f(mu) - y)`.
    pub fn potential_grad(&self, ens: &ParticleEnsemble, x: &[f64]) -> Result<Vec<f64>> {
        let r = self.residual(ens)?;
        self.vjp(x, r.as_slice())
    }

    /// Gradient of the potential for a given residual.
    pub fn potential_grad_with(&self, residual: &Residual, x: &[f64]) -> Result<Vec<f64>> {
        self.vjp(x, residual.as_slice())
    }

    /// `P(x) = 0.5 |phi(x)|^2`.
    pub fn penalty(&self, x: &[f64]) -> Result<f64> {
        Ok(0.5 * self.features(x)?.iter().map(|v| v * v).sum::<f64>())
    }

    /// `grad P(x) = Dphi(x)^T phi(x)`.
    pub fn penalty_grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_point(x)?;
        let m = self.samples();
        let mut h = vec![0.0; m];
        self.activations_into(x, &mut h);
        let mut phi = vec![0.0; m];
        self.features_from_activations(x, &h, &mut phi);
        let mut out = vec![0.0; self.param_dim()];
        self.vjp_from_activations(x, &h, &phi, &mut out);
        Ok(out)
    }

    /// Finite-width loss as a function of the stacked parameters.
    pub fn loss_of_positions(&self, theta: &[f64]) -> Result<f64> {
        self.loss(&ParticleEnsemble::from_flat(self.param_dim(), theta.to_vec())?)
    }
}

/// Result of [`lipschitz_certificate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LipschitzEstimate {
    /// Largest sampled ratio; a lower estimate of the true constant.
    pub empirical: f64,
    /// `Lip(Dphi) (|phi|_inf + |y|) + Lip(phi)^2`.
    pub analytic: f64,
    /// Number of non-degenerate pairs that entered the maximum.
    pub pairs: usize,
}

/// Monte Carlo lower estimate and analytic upper bound of the joint
/// Lipschitz constant of `(mu, x) -> grad V[mu](x)` for `W1 + |.|`.
pub fn lipschitz_certificate(
    model: &Model,
    sample_count: usize,
    radius: f64,
    seed: u64,
) -> Result<LipschitzEstimate> {
    let cert = model.certificate().ok_or_else(|| {
        Error::Unsupported(format!(
            "{} map is outside the bounded/Lipschitz class",
            model.kind()
        ))
    })?;
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::param("radius must be positive"));
    }
    let p = model.param_dim();
    let m = model.samples() as f64;
    let y_norm = norm(model.data().targets());
    let analytic =
        cert.jacobian_lipschitz * (cert.phi_entry * m.sqrt() + y_norm) + cert.jacobian * cert.jacobian;

    const ENSEMBLE: usize = 8;
    let mut empirical: f64 = 0.0;
    let mut pairs = 0;
    for s in 0..sample_count {
        let mut rng = rng::stream(seed, domain::MONTE_CARLO, s as u64);
        let mut gauss = |scale: f64| -> f64 {
            let g: f64 = StandardNormal.sample(&mut rng);
            scale * g
        };
        let x: Vec<f64> = (0..p).map(|_| gauss(1.0)).collect();
        let x2: Vec<f64> = x.iter().map(|v| v + gauss(radius)).collect();
        let mu: Vec<f64> = (0..ENSEMBLE * p).map(|_| gauss(1.0)).collect();
        let mu2: Vec<f64> = mu.iter().map(|v| v + gauss(radius)).collect();
        let mu = ParticleEnsemble::from_flat(p, mu)?;
        let mu2 = ParticleEnsemble::from_flat(p, mu2)?;
        let denom = dist(&x, &x2) + transport::w1_exact(&mu, &mu2)?;
        if denom == 0.0 {
            continue;
        }
        let g1 = model.potential_grad(&mu, &x)?;
        let g2 = model.potential_grad(&mu2, &x2)?;
        empirical = empirical.max(dist(&g1, &g2) / denom);
        pairs += 1;
    }
    Ok(LipschitzEstimate {
        empirical,
        analytic,
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(kind: FeatureKind) -> Model {
        let data = Dataset::new(
            vec![vec![1.0, -0.5], vec![0.25, 2.0], vec![-1.5, 0.75]],
            vec![0.3, -0.2, 0.1],
        )
        .unwrap();
        Model::new(FeatureMap::new(kind, 2), data).unwrap()
    }

    #[test]
    fn zero_outer_weight_gives_zero_features() {
        let model = toy(FeatureKind::BoundedSmooth);
        let phi = model.features(&[0.0, 0.3, -1.2, 0.7]).unwrap();
        assert!(phi.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_unit_value() {
        let data = Dataset::new(vec![vec![3.0, 0.0, 0.0]], vec![0.0]).unwrap();
        let model = Model::new(FeatureMap::new(FeatureKind::ReluStandard, 3), data).unwrap();
        let phi = model.features(&[2.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(phi, vec![6.0]);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let model = toy(FeatureKind::BoundedSmooth);
        assert!(matches!(
            model.features(&[0.0; 3]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(model.jacobian(&[0.0; 5]).is_err());
    }

    #[test]
    fn relu_kink_uses_zero_subgradient() {
        let data = Dataset::new(vec![vec![1.0]], vec![0.0]).unwrap();
        let model = Model::new(FeatureMap::new(FeatureKind::ReluStandard, 1), data).unwrap();
        // b.z + c = 0 exactly
        let jac = model.jacobian(&[1.5, 1.0, -1.0]).unwrap();
        assert_eq!(jac[(0, 1)], 0.0);
        assert_eq!(jac[(0, 2)], 0.0);
    }

    #[test]
    fn bias_column_on_zero_inputs_is_tanh_a() {
        let data = Dataset::new(vec![vec![0.0, 0.0]; 2], vec![0.0, 0.0]).unwrap();
        let model = Model::new(FeatureMap::new(FeatureKind::BoundedSmooth, 2), data).unwrap();
        let a: f64 = 0.8;
        let jac = model.jacobian(&[a, 0.4, -2.0, 0.0]).unwrap();
        assert!((jac[(0, 3)] - a.tanh()).abs() < 1e-15);
        assert!((jac[(1, 3)] - a.tanh()).abs() < 1e-15);
    }

    #[test]
    fn residual_norm_is_twice_loss() {
        let model = toy(FeatureKind::BoundedSmooth);
        let ens = ParticleEnsemble::from_rows(&[vec![0.5, 0.1, -0.3, 0.2], vec![-1.0, 0.7, 0.2, 0.0]])
            .unwrap();
        let r = model.residual(&ens).unwrap();
        assert_eq!(r.squared_norm(), 2.0 * model.loss(&ens).unwrap());
    }

    #[test]
    fn dataset_csv_round_trip() {
        let model = toy(FeatureKind::BoundedSmooth);
        let mut buf = Vec::new();
        model.data().to_csv_writer(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("z0,z1,y\n"));
        let back = Dataset::from_csv_reader(buf.as_slice()).unwrap();
        assert_eq!(&back, model.data());
    }

    #[test]
    fn dataset_rejects_ragged_inputs() {
        assert!(Dataset::new(vec![vec![1.0], vec![1.0, 2.0]], vec![0.0, 0.0]).is_err());
        assert!(Dataset::new(vec![vec![1.0]], vec![f64::NAN]).is_err());
        assert!(Dataset::new(vec![], vec![]).is_err());
    }

    #[test]
    fn feature_kind_parses() {
        assert_eq!("relu".parse::<FeatureKind>().unwrap(), FeatureKind::ReluStandard);
        assert_eq!(
            "bounded-smooth".parse::<FeatureKind>().unwrap(),
            FeatureKind::BoundedSmooth
        );
        assert!("sigmoid".parse::<FeatureKind>().is_err());
    }

    #[test]
    fn lipschitz_certificate_rejects_relu() {
        let model = toy(FeatureKind::ReluStandard);
        assert!(matches!(
            lipschitz_certificate(&model, 4, 0.1, 0),
            Err(Error::Unsupported(_))
        ));
    }
}
