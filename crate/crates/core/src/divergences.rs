//! Energy functionals and the velocity fields they induce.
//!
//! For an f-divergence with density ratio `r = q/p` the velocity is
//! `v(x) = -f''(r(x)) grad r(x)`; for the squared L2 density difference
//! `d = q - p` it is `v(x) = -2 grad d(x)`.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::error::{EptError, Result};
use crate::nets::ScalarField;
use crate::tensor::Tensor;

/// Ratio estimates are clamped into this range before applying `f''` for
/// divergences whose second derivative blows up near zero.
pub const RATIO_CLAMP: (f64, f64) = (1e-3, 1e3);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FDivergence {
    /// Pearson chi-square, `f(u) = (u - 1)^2 / 2`.
    Chi2,
    /// Kullback-Leibler, `f(u) = u log u`.
    Kl,
    /// Jensen-Shannon, `f(u) = u log u - (1 + u) log((1 + u) / 2)`.
    Js,
    /// `f(u) = u log u - (1 + u) log(1 + u) + 2 log 2`.
    #[serde(rename = "logd")]
    LogD,
}

pub fn make_f_divergence(name: &str) -> Result<FDivergence> {
    match name {
        "chi2" => Ok(FDivergence::Chi2),
        "kl" => Ok(FDivergence::Kl),
        "js" => Ok(FDivergence::Js),
        "logd" => Ok(FDivergence::LogD),
        _ => Err(EptError::UnknownName {
            kind: "divergence",
            name: name.to_string(),
        }),
    }
}

impl FDivergence {
    pub const ALL: [FDivergence; 4] = [Self::Chi2, Self::Kl, Self::Js, Self::LogD];

    pub fn name(self) -> &'static str {
        match self {
            Self::Chi2 => "chi2",
            Self::Kl => "kl",
            Self::Js => "js",
            Self::LogD => "logd",
        }
    }

    pub fn f(self, u: f64) -> f64 {
        match self {
            Self::Chi2 => 0.5 * (u - 1.0) * (u - 1.0),
            Self::Kl => u * u.ln(),
            Self::Js => u * u.ln() - (1.0 + u) * ((1.0 + u) / 2.0).ln(),
            Self::LogD => u * u.ln() - (1.0 + u) * (1.0 + u).ln() + 2.0 * LN_2,
        }
    }

    pub fn f_prime(self, u: f64) -> f64 {
        match self {
            Self::Chi2 => u - 1.0,
            Self::Kl => u.ln() + 1.0,
            Self::Js => (2.0 * u / (1.0 + u)).ln(),
            Self::LogD => (u / (1.0 + u)).ln(),
        }
    }

    pub fn f_double_prime(self, u: f64) -> f64 {
        match self {
            Self::Chi2 => 1.0,
            Self::Kl => 1.0 / u,
            Self::Js | Self::LogD => 1.0 / (u * (1.0 + u)),
        }
    }

    /// Whether ratio estimates must be clamped before `f''` is applied.
    pub fn clamps_ratio(self) -> bool {
        !matches!(self, Self::Chi2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum EnergyFunctional {
    FDivergence(FDivergence),
    L2Difference,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Estimated,
    Oracle,
    KernelBaseline,
}

/// Velocity evaluation with optional diagnostics.
#[derive(Clone, Debug)]
pub struct FieldEval {
    pub velocity: Tensor,
    /// Mean `||grad R||` over the evaluated points, for estimated fields.
    pub mean_grad_norm: Option<f64>,
    /// Number of ratio values that hit the clamp.
    pub clamped: usize,
}

/// A map `R^m -> R^m` evaluated row-wise on batches.
pub trait VelocityField: Send + Sync {
    fn eval(&self, xs: &Tensor) -> Result<Tensor> {
        Ok(self.eval_detailed(xs)?.velocity)
    }

    fn eval_detailed(&self, xs: &Tensor) -> Result<FieldEval>;

    fn provenance(&self) -> Provenance;
}

pub(crate) fn ratio_field_eval(f: FDivergence, field: &dyn ScalarField, xs: &Tensor) -> Result<FieldEval> {
    let (values, mut grads) = field.value_and_grad(xs)?;
    let m = xs.ncols();
    let mut clamped = 0;
    let mut norm_sum = 0.0;
    for (i, row) in grads.data_mut().chunks_mut(m).enumerate() {
        norm_sum += row.iter().map(|g| g * g).sum::<f64>().sqrt();
        let mut r = values.data()[i];
        if f.clamps_ratio() {
            let c = r.clamp(RATIO_CLAMP.0, RATIO_CLAMP.1);
            if c != r {
                clamped += 1;
                r = c;
            }
        }
        let scale = -f.f_double_prime(r);
        for g in row.iter_mut() {
            *g *= scale;
        }
    }
    if clamped > 0 {
        log::debug!("{}: clamped {clamped} ratio values", f.name());
    }
    let n = xs.nrows().max(1);
    Ok(FieldEval {
        velocity: grads,
        mean_grad_norm: Some(norm_sum / n as f64),
        clamped,
    })
}

/// `-f''(R(x_i)) grad R(x_i)` row-wise.
pub fn velocity_from_ratio(f: FDivergence, ratio: &dyn ScalarField, xs: &Tensor) -> Result<Tensor> {
    Ok(ratio_field_eval(f, ratio, xs)?.velocity)
}

/// `-2 grad D(x_i)` row-wise.
pub fn velocity_from_difference(diff: &dyn ScalarField, xs: &Tensor) -> Result<Tensor> {
    Ok(difference_velocity(diff, xs)?.velocity)
}

fn difference_velocity(diff: &dyn ScalarField, xs: &Tensor) -> Result<FieldEval> {
    let (_, grads) = diff.value_and_grad(xs)?;
    let norm_sum: f64 = grads
        .rows()
        .map(|r| r.iter().map(|g| g * g).sum::<f64>().sqrt())
        .sum();
    Ok(FieldEval {
        mean_grad_norm: Some(norm_sum / xs.nrows().max(1) as f64),
        velocity: grads.map(|g| -2.0 * g),
        clamped: 0,
    })
}

/// Velocity field of an energy functional driven by a fitted scalar field.
pub struct EstimatedVelocity<F> {
    pub energy: EnergyFunctional,
    pub field: F,
}

impl<F: ScalarField + Send> VelocityField for EstimatedVelocity<F> {
    fn eval_detailed(&self, xs: &Tensor) -> Result<FieldEval> {
        match self.energy {
            EnergyFunctional::FDivergence(f) => ratio_field_eval(f, &self.field, xs),
            EnergyFunctional::L2Difference => difference_velocity(&self.field, xs),
        }
    }

    fn provenance(&self) -> Provenance {
        Provenance::Estimated
    }
}

/// The identically zero field.
pub struct ZeroVelocity;

impl VelocityField for ZeroVelocity {
    fn eval_detailed(&self, xs: &Tensor) -> Result<FieldEval> {
        Ok(FieldEval {
            velocity: Tensor::zeros(xs.shape()),
            mean_grad_norm: None,
            clamped: 0,
        })
    }

    fn provenance(&self) -> Provenance {
        Provenance::Oracle
    }
}

/// A spatially constant field.
pub struct ConstantVelocity(pub Vec<f64>);

impl VelocityField for ConstantVelocity {
    fn eval_detailed(&self, xs: &Tensor) -> Result<FieldEval> {
        if xs.ncols() != self.0.len() {
            return Err(crate::error::shape_err("constant field dimension mismatch"));
        }
        let mut v = Tensor::zeros(xs.shape());
        for r in v.data_mut().chunks_mut(self.0.len()) {
            r.copy_from_slice(&self.0);
        }
        Ok(FieldEval {
            velocity: v,
            mean_grad_norm: None,
            clamped: 0,
        })
    }

    fn provenance(&self) -> Provenance {
        Provenance::Oracle
    }
}
