//! Reference samplers, 2D toy targets and analytic Gaussian mixtures.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, EptError, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const DATASETS: [&str; 11] = [
    "8gaussians",
    "pinwheel",
    "moons",
    "checkerboard",
    "2spirals",
    "circles",
    "4squares",
    "5squares",
    "small4gaussians",
    "large4gaussians",
    "1dgaussian",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    /// Overrides the generator's default noise scale.
    #[serde(default)]
    pub noise: Option<f64>,
}

impl DatasetSpec {
    pub fn new(name: &str, n: usize, seed: u64) -> Self {
        Self {
            name: name.to_string(),
            n,
            seed,
            noise: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(invalid("dataset size must be at least 1"));
        }
        if !DATASETS.contains(&self.name.as_str()) {
            return Err(EptError::UnknownName {
                kind: "dataset",
                name: self.name.clone(),
            });
        }
        if let Some(s) = self.noise {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(invalid("noise scale must be finite and non-negative"));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        if self.name == "1dgaussian" {
            1
        } else {
            2
        }
    }
}

fn normal(r: &mut impl Rng) -> f64 {
    r.sample(StandardNormal)
}

fn mixture_centers(name: &str) -> Option<(Vec<[f64; 2]>, f64)> {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    match name {
        "8gaussians" => Some((
            (0..8)
                .map(|k| {
                    let a = k as f64 * PI / 4.0;
                    [2.0 * a.cos(), 2.0 * a.sin()]
                })
                .collect(),
            0.2,
        )),
        "small4gaussians" => Some((vec![[s, s], [-s, s], [-s, -s], [s, -s]], 0.2)),
        "large4gaussians" => {
            let r = 3.0 * s;
            Some((vec![[r, r], [-r, r], [-r, -r], [r, -r]], 0.2))
        }
        _ => None,
    }
}

fn squares(count: usize) -> Vec<[f64; 2]> {
    let mut c = vec![[-1.5, -1.5], [1.5, -1.5], [-1.5, 1.5], [1.5, 1.5]];
    if count == 5 {
        c.push([0.0, 0.0]);
    }
    c
}

/// Draw `spec.n` points from a named target.
pub fn sample(spec: &DatasetSpec) -> Result<Tensor> {
    sample_from_stream(spec, &format!("data:{}", spec.name))
}

/// A sample independent of [`sample`] for the same spec, e.g. a held-out
/// evaluation set.
pub fn sample_for(spec: &DatasetSpec, purpose: &str) -> Result<Tensor> {
    sample_from_stream(spec, &format!("data:{}:{purpose}", spec.name))
}

fn sample_from_stream(spec: &DatasetSpec, label: &str) -> Result<Tensor> {
    spec.validate()?;
    let n = spec.n;
    let mut r = rng::stream(spec.seed, label);
    let mut rows: Vec<[f64; 2]> = Vec::with_capacity(n);
    match spec.name.as_str() {
        "8gaussians" | "small4gaussians" | "large4gaussians" => {
            let (centers, sd) = mixture_centers(&spec.name).unwrap();
            let sd = spec.noise.unwrap_or(sd);
            for _ in 0..n {
                let c = centers[r.random_range(0..centers.len())];
                rows.push([c[0] + sd * normal(&mut r), c[1] + sd * normal(&mut r)]);
            }
        }
        "moons" => {
            let noise = spec.noise.unwrap_or(0.1);
            let outer = n / 2;
            for i in 0..n {
                let t = PI * r.random::<f64>();
                let (x, y) = if i < outer {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                // centre the pair of moons on the origin
                rows.push([
                    x - 0.5 + noise * normal(&mut r),
                    y - 0.25 + noise * normal(&mut r),
                ]);
            }
        }
        "checkerboard" => {
            for _ in 0..n {
                let x1: f64 = r.random::<f64>() * 4.0 - 2.0;
                let x2_: f64 = r.random::<f64>() - 2.0 * r.random_range(0..2) as f64;
                let x2 = x2_ + x1.floor().rem_euclid(2.0);
                rows.push([x1, x2]);
            }
        }
        "2spirals" => {
            let noise = spec.noise.unwrap_or(0.1);
            for i in 0..n {
                let t = r.random::<f64>().sqrt() * 540.0 * (2.0 * PI) / 360.0;
                let dx = -t.cos() * t + r.random::<f64>() * 0.5;
                let dy = t.sin() * t + r.random::<f64>() * 0.5;
                let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                rows.push([
                    sign * dx / 3.0 + noise * normal(&mut r),
                    sign * dy / 3.0 + noise * normal(&mut r),
                ]);
            }
        }
        "pinwheel" => {
            let (radial_sd, tangential_sd, classes, rate) = (0.3, 0.1, 5usize, 0.25);
            for i in 0..n {
                let class = i % classes;
                let base = 2.0 * PI * class as f64 / classes as f64;
                let f0 = normal(&mut r) * radial_sd + 1.0;
                let f1 = normal(&mut r) * tangential_sd;
                let a = base + rate * f0.exp();
                let (c, s) = (a.cos(), a.sin());
                rows.push([2.0 * (f0 * c - f1 * s), 2.0 * (f0 * s + f1 * c)]);
            }
        }
        "circles" => {
            let noise = spec.noise.unwrap_or(0.08);
            let outer = n / 2;
            for i in 0..n {
                let t = 2.0 * PI * r.random::<f64>();
                let radius = if i < outer { 1.0 } else { 0.5 };
                rows.push([
                    3.0 * (radius * t.cos() + noise * normal(&mut r)),
                    3.0 * (radius * t.sin() + noise * normal(&mut r)),
                ]);
            }
        }
        "4squares" | "5squares" => {
            let centers = squares(if spec.name == "4squares" { 4 } else { 5 });
            for _ in 0..n {
                let c = centers[r.random_range(0..centers.len())];
                rows.push([
                    c[0] + r.random::<f64>() - 0.5,
                    c[1] + r.random::<f64>() - 0.5,
                ]);
            }
        }
        "1dgaussian" => {
            let data: Vec<f64> = (0..n).map(|_| normal(&mut r)).collect();
            return Tensor::new(vec![n, 1], data);
        }
        _ => unreachable!("validated above"),
    }
    Tensor::from_rows(&rows)
}

/// `n x m` i.i.d. standard normal rows.
pub fn reference_sample(m: usize, n: usize, seed: u64) -> Result<Tensor> {
    reference_sample_labeled(m, n, seed, "reference")
}

pub fn reference_sample_labeled(m: usize, n: usize, seed: u64, label: &str) -> Result<Tensor> {
    if m == 0 {
        return Err(invalid("reference dimension must be at least 1"));
    }
    let mut r = rng::stream(seed, label);
    let data = (0..n * m).map(|_| normal(&mut r)).collect();
    Tensor::new(vec![n, m], data)
}

/// One Gaussian mixture component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Row-major `m x m` covariance.
    pub cov: Vec<f64>,
}

#[derive(Clone, Debug)]
struct Prepared {
    log_weight: f64,
    mean: Vec<f64>,
    /// Lower Cholesky factor, row-major.
    chol: Vec<f64>,
    log_norm: f64,
}

/// Gaussian mixture with closed-form density and score.
#[derive(Clone, Debug)]
pub struct AnalyticTarget {
    dim: usize,
    components: Vec<Component>,
    prepared: Vec<Prepared>,
}

fn cholesky(a: &[f64], m: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..=i {
            let mut s = a[i * m + j];
            for k in 0..j {
                s -= l[i * m + k] * l[j * m + k];
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i * m + i] = s.sqrt();
            } else {
                l[i * m + j] = s / l[j * m + j];
            }
        }
    }
    Some(l)
}

impl AnalyticTarget {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        let dim = components
            .first()
            .map(|c| c.mean.len())
            .ok_or_else(|| invalid("mixture needs at least one component"))?;
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 || components.iter().any(|c| c.weight <= 0.0) {
            return Err(invalid("mixture weights must be positive and sum to 1"));
        }
        let mut prepared = Vec::with_capacity(components.len());
        for c in &components {
            if c.mean.len() != dim || c.cov.len() != dim * dim {
                return Err(shape_err("component dimensions differ"));
            }
            for i in 0..dim {
                for j in 0..i {
                    if (c.cov[i * dim + j] - c.cov[j * dim + i]).abs() > 1e-12 {
                        return Err(invalid("covariance must be symmetric"));
                    }
                }
            }
            let chol = cholesky(&c.cov, dim)
                .ok_or_else(|| invalid("covariance must be positive definite"))?;
            let log_det: f64 = (0..dim).map(|i| 2.0 * chol[i * dim + i].ln()).sum();
            prepared.push(Prepared {
                log_weight: c.weight.ln(),
                mean: c.mean.clone(),
                chol,
                log_norm: -0.5 * (dim as f64 * (2.0 * PI).ln() + log_det),
            });
        }
        Ok(Self {
            dim,
            components,
            prepared,
        })
    }

    /// Equal-weight isotropic mixture.
    pub fn isotropic(means: &[Vec<f64>], sd: f64) -> Result<Self> {
        let k = means.len();
        let components = means
            .iter()
            .map(|mu| {
                let m = mu.len();
                let mut cov = vec![0.0; m * m];
                for i in 0..m {
                    cov[i * m + i] = sd * sd;
                }
                Component {
                    weight: 1.0 / k as f64,
                    mean: mu.clone(),
                    cov,
                }
            })
            .collect();
        Self::new(components)
    }

    pub fn standard_normal(dim: usize) -> Result<Self> {
        Self::isotropic(&[vec![0.0; dim]], 1.0)
    }

    /// The named dataset as an analytic mixture, when it is one.
    pub fn for_dataset(name: &str) -> Option<Self> {
        if name == "1dgaussian" {
            return Self::standard_normal(1).ok();
        }
        let (centers, sd) = mixture_centers(name)?;
        let means: Vec<Vec<f64>> = centers.iter().map(|c| c.to_vec()).collect();
        Self::isotropic(&means, sd).ok()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    /// Per-component log weighted densities and whitened residuals `Sigma^-1 (x - mu)`.
    fn component_terms(&self, x: &[f64]) -> Vec<(f64, Vec<f64>)> {
        let m = self.dim;
        self.prepared
            .iter()
            .map(|p| {
                // forward solve L y = x - mu
                let mut y = vec![0.0; m];
                for i in 0..m {
                    let mut s = x[i] - p.mean[i];
                    for k in 0..i {
                        s -= p.chol[i * m + k] * y[k];
                    }
                    y[i] = s / p.chol[i * m + i];
                }
                let quad: f64 = y.iter().map(|v| v * v).sum();
                // back solve L^T z = y
                let mut z = vec![0.0; m];
                for i in (0..m).rev() {
                    let mut s = y[i];
                    for k in i + 1..m {
                        s -= p.chol[k * m + i] * z[k];
                    }
                    z[i] = s / p.chol[i * m + i];
                }
                (p.log_weight + p.log_norm - 0.5 * quad, z)
            })
            .collect()
    }

    pub fn log_density_at(&self, x: &[f64]) -> f64 {
        let terms = self.component_terms(x);
        let max = terms.iter().map(|t| t.0).fold(f64::NEG_INFINITY, f64::max);
        max + terms.iter().map(|t| (t.0 - max).exp()).sum::<f64>().ln()
    }

    pub fn score_at(&self, x: &[f64]) -> Vec<f64> {
        let terms = self.component_terms(x);
        let max = terms.iter().map(|t| t.0).fold(f64::NEG_INFINITY, f64::max);
        let mut num = vec![0.0; self.dim];
        let mut den = 0.0;
        for (lw, z) in &terms {
            let w = (lw - max).exp();
            den += w;
            for (o, zi) in num.iter_mut().zip(z) {
                *o -= w * zi;
            }
        }
        num.iter().map(|v| v / den).collect()
    }

    fn check(&self, xs: &Tensor) -> Result<()> {
        if xs.rank() != 2 || xs.ncols() != self.dim {
            return Err(shape_err(format!(
                "expected n x {} points, got {:?}",
                self.dim,
                xs.shape()
            )));
        }
        Ok(())
    }

    /// Sample from the mixture.
    pub fn sample(&self, n: usize, r: &mut impl Rng) -> Tensor {
        let m = self.dim;
        let mut data = Vec::with_capacity(n * m);
        for _ in 0..n {
            let u: f64 = r.random();
            let mut acc = 0.0;
            let mut k = self.components.len() - 1;
            for (i, c) in self.components.iter().enumerate() {
                acc += c.weight;
                if u < acc {
                    k = i;
                    break;
                }
            }
            let p = &self.prepared[k];
            let e: Vec<f64> = (0..m).map(|_| normal(r)).collect();
            for i in 0..m {
                let s: f64 = (0..=i).map(|j| p.chol[i * m + j] * e[j]).sum();
                data.push(p.mean[i] + s);
            }
        }
        Tensor::new(vec![n, m], data).expect("sample shape")
    }
}

pub fn analytic_density(target: &AnalyticTarget, xs: &Tensor) -> Result<Tensor> {
    target.check(xs)?;
    Ok(Tensor::vector(
        xs.rows().map(|r| target.log_density_at(r).exp()).collect(),
    ))
}

pub fn analytic_score(target: &AnalyticTarget, xs: &Tensor) -> Result<Tensor> {
    target.check(xs)?;
    let rows: Vec<Vec<f64>> = xs.rows().map(|r| target.score_at(r)).collect();
    let mut t = Tensor::from_rows(&rows)?;
    if xs.nrows() == 0 {
        t = Tensor::zeros(&[0, target.dim]);
    }
    Ok(t)
}
