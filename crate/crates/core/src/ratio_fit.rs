//! Bregman-score fitting of density ratios and density differences.
//!
//! Three objectives share one training loop:
//!
//! * `lsdr`: `mean_X R^2 - 2 mean_Y R + alpha mean_X |grad R|^2`
//! * `lr`: `mean_X log(1 + R) - mean_Y log(R / (1 + R))
//!   + alpha mean_X |grad R|^2 / (2 R (1 + R))`, with `R = softplus(u)`
//! * `density-diff`: `2 mean_X D - 2 mean_Y D + mean_W D^2 + alpha mean_W |grad D|^2`
//!
//! `X` is a batch from the target `p`, `Y` a batch of particles from `q`, and
//! `W` the pooled batch `X ∪ Y`. The ratio objectives are minimised by
//! `q / p`; the difference objective by `(q - p) / w` with `w = (p + q) / 2`.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{input_gradient, second_order_param_grad, Tape, Var};
use crate::error::{invalid, shape_err, EptError, Result};
use crate::nets::{RmsPropState, ScalarField, ScalarFieldNet};
use crate::rng;
use crate::tensor::Tensor;

/// Losses beyond this magnitude abort the fit.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitVariant {
    Lsdr,
    Lr,
    DensityDiff,
}

impl FitVariant {
    pub fn name(self) -> &'static str {
        match self {
            Self::Lsdr => "lsdr",
            Self::Lr => "lr",
            Self::DensityDiff => "density-diff",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "lsdr" => Ok(Self::Lsdr),
            "lr" => Ok(Self::Lr),
            "density-diff" => Ok(Self::DensityDiff),
            _ => Err(EptError::UnknownName {
                kind: "objective",
                name: name.to_string(),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitObjective {
    pub variant: FitVariant,
    pub alpha: f64,
}

impl FitObjective {
    pub fn new(variant: FitVariant, alpha: f64) -> Result<Self> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(invalid(format!("alpha must be finite and >= 0, got {alpha}")));
        }
        Ok(Self { variant, alpha })
    }

    pub fn lsdr(alpha: f64) -> Result<Self> {
        Self::new(FitVariant::Lsdr, alpha)
    }
}

/// Objective value split into its parts, with parameter gradients of the total.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub loss: f64,
    pub bregman: f64,
    pub penalty: f64,
    pub grads: Vec<Tensor>,
}

fn check_batches(net: &ScalarFieldNet, batches: &[(&str, &Tensor)]) -> Result<()> {
    let m = net.input_dim();
    for (name, b) in batches {
        if b.rank() != 2 || b.ncols() != m {
            return Err(shape_err(format!("{name} batch: expected n x {m}, got {:?}", b.shape())));
        }
        if b.nrows() == 0 {
            return Err(invalid(format!("{name} batch is empty")));
        }
        b.ensure_finite(name)?;
    }
    Ok(())
}

struct Built {
    tape: Tape,
    params: Vec<Var>,
    bregman: Var,
    penalty: Option<Var>,
    total: Var,
}

fn finish(b: Built) -> Result<LossEval> {
    let loss = b.tape.value(b.total).expect("eager").item();
    let bregman = b.tape.value(b.bregman).expect("eager").item();
    let penalty = b.penalty.map_or(0.0, |p| b.tape.value(p).expect("eager").item());
    if !loss.is_finite() {
        return Err(EptError::NonFinite {
            context: "fit loss".into(),
        });
    }
    let grads = second_order_param_grad(&b.tape, b.total, &b.params)?;
    Ok(LossEval {
        loss,
        bregman,
        penalty,
        grads,
    })
}

/// `mean_rows(weight * |grad_x field|^2)` where `field` is an `(n,)` output on input `x`.
fn grad_sq_mean(tape: &mut Tape, field: Var, x: Var, weight: Option<Var>) -> Result<Var> {
    let s = tape.sum(field)?;
    let g = input_gradient(tape, s, x)?;
    let sq = tape.square(g)?;
    let mut per_row = tape.sum_cols(sq)?;
    if let Some(w) = weight {
        per_row = tape.mul(per_row, w)?;
    }
    tape.mean(per_row)
}

fn with_penalty(mut tape: Tape, params: Vec<Var>, bregman: Var, penalty: Option<Var>, alpha: f64) -> Result<Built> {
    let total = match penalty {
        Some(p) => {
            let scaled = tape.scale(p, alpha)?;
            tape.add(bregman, scaled)?
        }
        None => bregman,
    };
    Ok(Built {
        tape,
        params,
        bregman,
        penalty,
        total,
    })
}

/// Gradient-regularised least-squares ratio loss.
pub fn lsdr_loss(net: &ScalarFieldNet, x_target: &Tensor, y_model: &Tensor, alpha: f64) -> Result<LossEval> {
    check_batches(net, &[("target", x_target), ("model", y_model)])?;
    let mut t = Tape::new();
    let params = net.mlp.bind(&mut t)?;
    let x = t.input_with(x_target.clone())?;
    let y = t.input_with(y_model.clone())?;
    let rx = net.apply(&mut t, &params, x)?;
    let ry = net.apply(&mut t, &params, y)?;
    let rx2 = t.square(rx)?;
    let a = t.mean(rx2)?;
    let b = t.mean(ry)?;
    let b2 = t.scale(b, 2.0)?;
    let bregman = t.sub(a, b2)?;
    let penalty = if alpha > 0.0 {
        Some(grad_sq_mean(&mut t, rx, x, None)?)
    } else {
        None
    };
    finish(with_penalty(t, params, bregman, penalty, alpha)?)
}

/// The least-squares ratio loss of an arbitrary field, without parameter
/// gradients: `(total, bregman, penalty)`.
pub fn lsdr_field_loss(field: &dyn ScalarField, x_target: &Tensor, y_model: &Tensor, alpha: f64) -> Result<(f64, f64, f64)> {
    for (name, b) in [("target", x_target), ("model", y_model)] {
        if b.rank() != 2 || b.ncols() != field.dim() || b.nrows() == 0 {
            return Err(shape_err(format!("{name} batch: expected n x {}, got {:?}", field.dim(), b.shape())));
        }
    }
    let (rx, gx) = field.value_and_grad(x_target)?;
    let (ry, _) = field.value_and_grad(y_model)?;
    let bregman = rx.data().iter().map(|r| r * r).sum::<f64>() / rx.len() as f64 - 2.0 * ry.mean();
    let penalty = if alpha > 0.0 {
        gx.data().iter().map(|g| g * g).sum::<f64>() / x_target.nrows() as f64
    } else {
        0.0
    };
    let total = bregman + alpha * penalty;
    if !total.is_finite() {
        return Err(EptError::NonFinite {
            context: "fit loss".into(),
        });
    }
    Ok((total, bregman, penalty))
}

/// Logistic-regression Bregman loss on `R = softplus(net)`.
pub fn lr_loss(net: &ScalarFieldNet, x_target: &Tensor, y_model: &Tensor, alpha: f64) -> Result<LossEval> {
    check_batches(net, &[("target", x_target), ("model", y_model)])?;
    let mut t = Tape::new();
    let params = net.mlp.bind(&mut t)?;
    let x = t.input_with(x_target.clone())?;
    let y = t.input_with(y_model.clone())?;
    let ux = net.apply(&mut t, &params, x)?;
    let uy = net.apply(&mut t, &params, y)?;
    let rx = t.softplus(ux)?;
    let ry = t.softplus(uy)?;
    // mean_X log(1 + R)
    let rx1 = t.add_scalar(rx, 1.0)?;
    let lx = t.ln(rx1)?;
    let a = t.mean(lx)?;
    // mean_Y log(R / (1 + R))
    let ry1 = t.add_scalar(ry, 1.0)?;
    let lry = t.ln(ry)?;
    let lry1 = t.ln(ry1)?;
    let ly = t.sub(lry, lry1)?;
    let b = t.mean(ly)?;
    let bregman = t.sub(a, b)?;
    let penalty = if alpha > 0.0 {
        // g''(R) / 2 = 1 / (2 R (1 + R))
        let denom = t.mul(rx, rx1)?;
        let denom = t.scale(denom, 2.0)?;
        let c = t.scalar_constant(1.0)?;
        let one = t.fill(c, &[x_target.nrows()])?;
        let w = t.div(one, denom)?;
        Some(grad_sq_mean(&mut t, rx, x, Some(w))?)
    } else {
        None
    };
    finish(with_penalty(t, params, bregman, penalty, alpha)?)
}

/// Least-squares density-difference loss with base batch `w_base`.
pub fn density_diff_loss(
    net: &ScalarFieldNet,
    x_target: &Tensor,
    y_model: &Tensor,
    w_base: &Tensor,
    alpha: f64,
) -> Result<LossEval> {
    check_batches(net, &[("target", x_target), ("model", y_model), ("base", w_base)])?;
    let mut t = Tape::new();
    let params = net.mlp.bind(&mut t)?;
    let x = t.input_with(x_target.clone())?;
    let y = t.input_with(y_model.clone())?;
    let w = t.input_with(w_base.clone())?;
    let dx = net.apply(&mut t, &params, x)?;
    let dy = net.apply(&mut t, &params, y)?;
    let dw = net.apply(&mut t, &params, w)?;
    let a = t.mean(dx)?;
    let b = t.mean(dy)?;
    let diff = t.sub(a, b)?;
    let diff2 = t.scale(diff, 2.0)?;
    let dw2 = t.square(dw)?;
    let c = t.mean(dw2)?;
    let bregman = t.add(diff2, c)?;
    let penalty = if alpha > 0.0 {
        Some(grad_sq_mean(&mut t, dw, w, None)?)
    } else {
        None
    };
    finish(with_penalty(t, params, bregman, penalty, alpha)?)
}

/// Evaluate `objective` on one pair of batches; the difference objective
/// uses the pooled batch as its base sample.
pub fn objective_loss(objective: &FitObjective, net: &ScalarFieldNet, x: &Tensor, y: &Tensor) -> Result<LossEval> {
    match objective.variant {
        FitVariant::Lsdr => lsdr_loss(net, x, y, objective.alpha),
        FitVariant::Lr => lr_loss(net, x, y, objective.alpha),
        FitVariant::DensityDiff => {
            let w = Tensor::vstack(&[x, y])?;
            density_diff_loss(net, x, y, &w, objective.alpha)
        }
    }
}

/// The fitted function handed to the velocity: the raw network, or
/// `softplus` of it for the logistic objective.
#[derive(Clone, Debug)]
pub struct FittedField<'a> {
    pub net: &'a ScalarFieldNet,
    pub softplus: bool,
}

impl<'a> FittedField<'a> {
    pub fn new(net: &'a ScalarFieldNet, variant: FitVariant) -> Self {
        Self {
            net,
            softplus: variant == FitVariant::Lr,
        }
    }
}

fn softplus(u: f64) -> f64 {
    if u > 0.0 {
        u + (-u).exp().ln_1p()
    } else {
        u.exp().ln_1p()
    }
}

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

impl ScalarField for FittedField<'_> {
    fn dim(&self) -> usize {
        self.net.input_dim()
    }

    fn value_and_grad(&self, xs: &Tensor) -> Result<(Tensor, Tensor)> {
        let (u, mut g) = self.net.value_and_grad(xs)?;
        if !self.softplus {
            return Ok((u, g));
        }
        let m = xs.ncols();
        for (row, &ui) in g.data_mut().chunks_mut(m).zip(u.data()) {
            let s = sigmoid(ui);
            row.iter_mut().for_each(|v| *v *= s);
        }
        Ok((u.map(softplus), g))
    }
}

/// Epoch-wise sampling without replacement. The permutation for epoch `e`
/// comes from its own indexed stream, so the state is just `(epoch, cursor)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchSampler {
    n: usize,
    batch: usize,
    seed: u64,
    label: String,
    epoch: u64,
    cursor: usize,
    #[serde(skip)]
    perm: Vec<usize>,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, seed: u64, label: &str) -> Result<Self> {
        if batch == 0 || batch > n {
            return Err(invalid(format!("batch size {batch} must be in 1..={n}")));
        }
        Ok(Self {
            n,
            batch,
            seed,
            label: label.to_string(),
            epoch: 0,
            cursor: 0,
            perm: Vec::new(),
        })
    }

    pub fn population(&self) -> usize {
        self.n
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn position(&self) -> (u64, usize) {
        (self.epoch, self.cursor)
    }

    fn shuffle(&mut self) {
        self.perm = (0..self.n).collect();
        let mut r = rng::indexed_stream(self.seed, &self.label, self.epoch);
        self.perm.shuffle(&mut r);
    }

    /// Indices of the next batch.
    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.perm.len() != self.n {
            self.shuffle();
        }
        if self.cursor + self.batch > self.n {
            self.epoch += 1;
            self.cursor = 0;
            self.shuffle();
        }
        let out = self.perm[self.cursor..self.cursor + self.batch].to_vec();
        self.cursor += self.batch;
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Total loss after the last step's batch (before its update).
    pub final_loss: f64,
    pub losses: Vec<f64>,
    pub bregman: Vec<f64>,
    pub penalties: Vec<f64>,
    /// Mean `|grad R|` over the last target batch, after the updates.
    pub mean_grad_norm: f64,
    pub steps: usize,
}

/// Ratio network, optimiser and batch streams: everything the inner loop
/// carries from one transport iteration to the next.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fitter {
    pub objective: FitObjective,
    pub net: ScalarFieldNet,
    pub optimizer: RmsPropState,
    pub target_batches: BatchSampler,
    pub particle_batches: BatchSampler,
}

impl Fitter {
    pub fn new(
        objective: FitObjective,
        net: ScalarFieldNet,
        lr: f64,
        batch: usize,
        n_target: usize,
        n_particles: usize,
        seed: u64,
    ) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(invalid("learning rate must be finite and >= 0"));
        }
        if batch > n_target.min(n_particles) {
            return Err(invalid(format!(
                "batch {batch} exceeds min(|data|, |particles|) = {}",
                n_target.min(n_particles)
            )));
        }
        let optimizer = RmsPropState::new(lr, net.mlp.params());
        Ok(Self {
            objective,
            net,
            optimizer,
            target_batches: BatchSampler::new(n_target, batch, seed, "fit:target-batches")?,
            particle_batches: BatchSampler::new(n_particles, batch, seed, "fit:particle-batches")?,
        })
    }

    /// Run `steps` minibatch updates against the current particles.
    pub fn fit(&mut self, target: &Tensor, particles: &Tensor, steps: usize) -> Result<FitReport> {
        fit_step_loop(self, target, particles, steps)
    }

    pub fn field(&self) -> FittedField<'_> {
        FittedField::new(&self.net, self.objective.variant)
    }
}

/// `steps` minibatch SGD updates of the fitter's network; fresh batches each
/// step, sampled without replacement within an epoch.
pub fn fit_step_loop(fitter: &mut Fitter, target: &Tensor, particles: &Tensor, steps: usize) -> Result<FitReport> {
    if steps == 0 {
        return Err(invalid("number of fitting steps must be at least 1"));
    }
    if target.nrows() != fitter.target_batches.population()
        || particles.nrows() != fitter.particle_batches.population()
    {
        return Err(shape_err("sample sizes differ from the fitter's batch streams"));
    }
    let mut report = FitReport {
        final_loss: f64::NAN,
        losses: Vec::with_capacity(steps),
        bregman: Vec::with_capacity(steps),
        penalties: Vec::with_capacity(steps),
        mean_grad_norm: f64::NAN,
        steps: 0,
    };
    let mut last_x = None;
    for step in 0..steps {
        let x = target.select_rows(&fitter.target_batches.next_indices());
        let y = particles.select_rows(&fitter.particle_batches.next_indices());
        let eval = objective_loss(&fitter.objective, &fitter.net, &x, &y)?;
        if eval.loss.abs() > DIVERGENCE_LIMIT {
            return Err(EptError::Diverged {
                step,
                loss: eval.loss,
            });
        }
        fitter.optimizer.step(fitter.net.mlp.params_mut(), &eval.grads)?;
        report.losses.push(eval.loss);
        report.bregman.push(eval.bregman);
        report.penalties.push(eval.penalty);
        report.final_loss = eval.loss;
        report.steps += 1;
        last_x = Some(x);
    }
    if let Some(x) = last_x {
        let (_, g) = fitter.field().value_and_grad(&x)?;
        let norms: f64 = g.rows().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).sum();
        report.mean_grad_norm = norms / x.nrows() as f64;
    }
    Ok(report)
}
