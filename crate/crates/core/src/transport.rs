//! Forward-Euler particle transport.
//!
//! Each iteration builds a velocity field from the current ensemble and moves
//! every particle by `x <- x + s v(x)`, with `v` evaluated at the start-of-step
//! ensemble. The plain loop fits a ratio network and steps the particles; the
//! latent variant regenerates particles from a generator each outer loop,
//! transports them, and regresses the generator onto the result.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autodiff::Tape;
use crate::baselines::{MmdFlowField, RbfKernel, SvgdField};
use crate::data::{self, AnalyticTarget, DatasetSpec};
use crate::divergences::{
    make_f_divergence, EnergyFunctional, EstimatedVelocity, FieldEval, VelocityField,
};
use crate::error::{invalid, shape_err, EptError, Result};
use crate::metrics::{mmd_squared, wasserstein2_exact, Bandwidth, KdeRatio, KdeRatioVelocity};
use crate::nets::{init_scalar_net, GeneratorNet, RmsPropState, ScalarFieldNet};
use crate::parallel::CHUNK_ROWS;
use crate::ratio_fit::{FitObjective, FitReport, FitVariant, FittedField, Fitter};
use crate::rng;
use crate::tensor::Tensor;

/// Particles at iteration `iteration`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticleEnsemble {
    pub points: Tensor,
    pub iteration: usize,
    pub seed: u64,
}

impl ParticleEnsemble {
    pub fn new(points: Tensor, seed: u64) -> Result<Self> {
        if points.rank() != 2 || points.ncols() == 0 {
            return Err(shape_err(format!("particles must be n x m, got {:?}", points.shape())));
        }
        points.ensure_finite("particles")?;
        Ok(Self {
            points,
            iteration: 0,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }
}

/// Evaluate `field` on `xs` in fixed row chunks. Chunk boundaries do not
/// depend on the thread count, so the result is the same for any worker pool.
pub fn eval_field(field: &dyn VelocityField, xs: &Tensor) -> Result<FieldEval> {
    use rayon::prelude::*;
    let n = xs.nrows();
    if n <= CHUNK_ROWS || crate::parallel::thread_count() <= 1 {
        return eval_serial(field, xs);
    }
    let starts: Vec<usize> = (0..n).step_by(CHUNK_ROWS).collect();
    let parts: Vec<FieldEval> = starts
        .par_iter()
        .map(|&s| field.eval_detailed(&xs.slice_rows(s, (s + CHUNK_ROWS).min(n))))
        .collect::<Result<_>>()?;
    combine(parts, n)
}

fn eval_serial(field: &dyn VelocityField, xs: &Tensor) -> Result<FieldEval> {
    let n = xs.nrows();
    if n <= CHUNK_ROWS {
        return field.eval_detailed(xs);
    }
    let parts = (0..n)
        .step_by(CHUNK_ROWS)
        .map(|s| field.eval_detailed(&xs.slice_rows(s, (s + CHUNK_ROWS).min(n))))
        .collect::<Result<Vec<_>>>()?;
    combine(parts, n)
}

fn combine(parts: Vec<FieldEval>, n: usize) -> Result<FieldEval> {
    let mut norm = Some(0.0);
    let mut clamped = 0;
    for p in &parts {
        clamped += p.clamped;
        norm = match (norm, p.mean_grad_norm) {
            (Some(acc), Some(v)) => Some(acc + v * p.velocity.nrows() as f64),
            _ => None,
        };
    }
    let refs: Vec<&Tensor> = parts.iter().map(|p| &p.velocity).collect();
    Ok(FieldEval {
        velocity: Tensor::vstack(&refs)?,
        mean_grad_norm: norm.map(|s| s / n as f64),
        clamped,
    })
}

fn first_nonfinite_row(v: &Tensor) -> Option<usize> {
    v.rows().position(|r| r.iter().any(|x| !x.is_finite()))
}

/// One explicit Euler step `x <- x + s v(x)`.
pub fn euler_step(ens: &ParticleEnsemble, field: &dyn VelocityField, s: f64) -> Result<(ParticleEnsemble, FieldEval)> {
    if !(s > 0.0 && s.is_finite()) {
        return Err(invalid(format!("step size must be positive, got {s}")));
    }
    let eval = eval_field(field, &ens.points)?;
    if eval.velocity.shape() != ens.points.shape() {
        return Err(shape_err("velocity shape differs from particles"));
    }
    if let Some(index) = first_nonfinite_row(&eval.velocity) {
        return Err(EptError::NonFiniteVelocity { index });
    }
    let points = ens.points.zip_map(&eval.velocity, |x, v| x + s * v);
    if let Some(index) = first_nonfinite_row(&points) {
        return Err(EptError::NonFiniteVelocity { index });
    }
    Ok((
        ParticleEnsemble {
            points,
            iteration: ens.iteration + 1,
            seed: ens.seed,
        },
        eval,
    ))
}

/// A velocity field built for the current ensemble, plus fit diagnostics.
pub struct ProvidedField<'a> {
    pub field: Box<dyn VelocityField + 'a>,
    pub fit: Option<FitReport>,
}

/// Frozen velocity of one estimated-field iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapStep {
    pub net: ScalarFieldNet,
    pub variant: FitVariant,
    pub energy: EnergyFunctional,
}

/// Produces the velocity for each iteration.
pub trait VelocityProvider {
    fn name(&self) -> String;

    fn velocity<'a>(&'a mut self, particles: &'a Tensor, iteration: usize) -> Result<ProvidedField<'a>>;

    /// Serializable state needed to resume.
    fn state(&self) -> Result<Value> {
        Ok(Value::Null)
    }

    fn restore(&mut self, _state: &Value) -> Result<()> {
        Ok(())
    }

    /// The frozen map of the last built field, when it does not depend on
    /// the particles.
    fn map_step(&self) -> Option<MapStep> {
        None
    }
}

/// Fitted-ratio (or difference) velocity.
pub struct EptProvider {
    pub fitter: Fitter,
    pub energy: EnergyFunctional,
    pub target: Tensor,
    pub steps: usize,
    /// Re-initialise the network every iteration instead of warm starting.
    pub reinit: Option<(Vec<usize>, u64)>,
}

impl VelocityProvider for EptProvider {
    fn name(&self) -> String {
        match self.energy {
            EnergyFunctional::FDivergence(f) => format!("ept-{}", f.name()),
            EnergyFunctional::L2Difference => "ept-l2".into(),
        }
    }

    fn velocity<'a>(&'a mut self, particles: &'a Tensor, iteration: usize) -> Result<ProvidedField<'a>> {
        if let Some((widths, seed)) = &self.reinit {
            let net = init_scalar_net(particles.ncols(), widths, seed.wrapping_add(iteration as u64))?;
            self.fitter.optimizer = RmsPropState::new(self.fitter.optimizer.lr, net.mlp.params());
            self.fitter.net = net;
        }
        let report = self.fitter.fit(&self.target, particles, self.steps)?;
        Ok(ProvidedField {
            field: Box::new(EstimatedVelocity {
                energy: self.energy,
                field: self.fitter.field(),
            }),
            fit: Some(report),
        })
    }

    fn state(&self) -> Result<Value> {
        Ok(serde_json::to_value(&self.fitter)?)
    }

    fn restore(&mut self, state: &Value) -> Result<()> {
        self.fitter = serde_json::from_value(state.clone())?;
        Ok(())
    }

    fn map_step(&self) -> Option<MapStep> {
        Some(MapStep {
            net: self.fitter.net.clone(),
            variant: self.fitter.objective.variant,
            energy: self.energy,
        })
    }
}

pub struct MmdFlowProvider {
    pub kernel: RbfKernel,
    pub target: Tensor,
}

impl VelocityProvider for MmdFlowProvider {
    fn name(&self) -> String {
        "mmd-flow".into()
    }

    fn velocity<'a>(&'a mut self, particles: &'a Tensor, _iteration: usize) -> Result<ProvidedField<'a>> {
        Ok(ProvidedField {
            field: Box::new(MmdFlowField {
                kernel: self.kernel,
                target: &self.target,
                particles,
            }),
            fit: None,
        })
    }
}

pub struct SvgdProvider {
    pub kernel: RbfKernel,
    pub score: AnalyticTarget,
}

impl VelocityProvider for SvgdProvider {
    fn name(&self) -> String {
        "svgd".into()
    }

    fn velocity<'a>(&'a mut self, particles: &'a Tensor, _iteration: usize) -> Result<ProvidedField<'a>> {
        Ok(ProvidedField {
            field: Box::new(SvgdField {
                kernel: self.kernel,
                score: &self.score,
                particles,
            }),
            fit: None,
        })
    }
}

/// Velocity from the KDE ratio of particles to a target sample.
pub struct KdeOracleProvider {
    pub divergence: crate::divergences::FDivergence,
    pub target: Tensor,
    pub bandwidth: Bandwidth,
}

impl VelocityProvider for KdeOracleProvider {
    fn name(&self) -> String {
        format!("kde-oracle-{}", self.divergence.name())
    }

    fn velocity<'a>(&'a mut self, particles: &'a Tensor, _iteration: usize) -> Result<ProvidedField<'a>> {
        let ratio = KdeRatio::new(particles, &self.target, &self.bandwidth, &self.bandwidth)?;
        Ok(ProvidedField {
            field: Box::new(KdeRatioVelocity {
                divergence: self.divergence,
                ratio,
            }),
            fit: None,
        })
    }
}

/// A field that ignores the ensemble.
pub struct FixedProvider<V>(pub V);

impl<V: VelocityField> VelocityProvider for FixedProvider<V> {
    fn name(&self) -> String {
        "fixed".into()
    }

    fn velocity<'a>(&'a mut self, _particles: &'a Tensor, _iteration: usize) -> Result<ProvidedField<'a>> {
        Ok(ProvidedField {
            field: Box::new(Borrowed(&self.0)),
            fit: None,
        })
    }
}

struct Borrowed<'a, V>(&'a V);

impl<V: VelocityField> VelocityField for Borrowed<'_, V> {
    fn eval_detailed(&self, xs: &Tensor) -> Result<FieldEval> {
        self.0.eval_detailed(xs)
    }

    fn provenance(&self) -> crate::divergences::Provenance {
        self.0.provenance()
    }
}

/// The composed map `T_K o ... o T_0` of an estimated-field run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ComposedMap {
    pub s: f64,
    pub steps: Vec<MapStep>,
}

impl ComposedMap {
    /// Push `xs` through every recorded step.
    pub fn apply(&self, xs: &Tensor) -> Result<Tensor> {
        let mut ens = ParticleEnsemble::new(xs.clone(), 0)?;
        for step in &self.steps {
            let field = EstimatedVelocity {
                energy: step.energy,
                field: FittedField::new(&step.net, step.variant),
            };
            ens = euler_step(&ens, &field, self.s)?.0;
        }
        Ok(ens.points)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterDiagnostics {
    pub iteration: usize,
    /// Bregman part of the objective on the last fit batch.
    pub fit_loss: Option<f64>,
    pub penalty: Option<f64>,
    pub total_loss: Option<f64>,
    /// Mean `|grad R|` over the particles.
    pub grad_norm: Option<f64>,
    /// Mean `|v|` over the particles.
    pub mean_speed: f64,
    pub clamped: usize,
    pub mmd2: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub iteration: usize,
    pub points: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuterDiagnostics {
    pub outer: usize,
    pub regression_before: f64,
    pub regression_after: f64,
}

/// Everything a run produces; also the resumable checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub s: f64,
    pub initial: Tensor,
    pub ensemble: ParticleEnsemble,
    pub diagnostics: Vec<IterDiagnostics>,
    pub outer: Vec<OuterDiagnostics>,
    pub snapshots: Vec<Snapshot>,
    pub map: Option<ComposedMap>,
    pub provider_state: Value,
    pub generator: Option<GeneratorNet>,
}

impl RunRecord {
    pub fn final_points(&self) -> &Tensor {
        &self.ensemble.points
    }

    pub fn iterations(&self) -> usize {
        self.ensemble.iteration
    }

    fn push_snapshot(&mut self) {
        let it = self.ensemble.iteration;
        if self.snapshots.last().is_some_and(|s| s.iteration == it) {
            return;
        }
        self.snapshots.push(Snapshot {
            iteration: it,
            points: self.ensemble.points.clone(),
        });
    }
}

/// Optional MMD^2 tracking during a run.
#[derive(Clone, Debug)]
pub struct MetricProbe {
    pub target: Tensor,
    pub kernel: RbfKernel,
    pub every: usize,
    /// Particles are subsampled with a fixed stride to at most this many.
    pub max_points: usize,
}

impl MetricProbe {
    fn eval(&self, points: &Tensor) -> Result<f64> {
        let take = |t: &Tensor| {
            let n = t.nrows();
            let k = n.min(self.max_points);
            let idx: Vec<usize> = (0..k).map(|i| i * n / k).collect();
            t.select_rows(&idx)
        };
        mmd_squared(&take(points), &take(&self.target), &self.kernel)
    }
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub s: f64,
    pub iterations: usize,
    /// Snapshot every this many iterations (0: first and last only).
    pub snapshot_every: usize,
    pub record_map: bool,
    pub metric: Option<MetricProbe>,
}

/// Start a fresh record for `initial` particles.
pub fn new_record(provider: &dyn VelocityProvider, initial: &Tensor, s: f64, seed: u64, record_map: bool) -> Result<RunRecord> {
    let ensemble = ParticleEnsemble::new(initial.clone(), seed)?;
    let mut rec = RunRecord {
        method: provider.name(),
        s,
        initial: initial.clone(),
        ensemble,
        diagnostics: Vec::new(),
        outer: Vec::new(),
        snapshots: Vec::new(),
        map: record_map.then(|| ComposedMap {
            s,
            steps: Vec::new(),
        }),
        provider_state: provider.state()?,
        generator: None,
    };
    rec.push_snapshot();
    Ok(rec)
}

/// Advance `record` until it has `opts.iterations` iterations in total.
/// On error the record holds every completed iteration.
pub fn advance(provider: &mut dyn VelocityProvider, record: &mut RunRecord, opts: &RunOptions) -> Result<()> {
    advance_until(provider, record, opts, opts.iterations)
}

/// Like [`advance`], but stop after `until` iterations; the run is still
/// treated as an `opts.iterations`-step run for snapshots and metrics.
pub fn advance_until(
    provider: &mut dyn VelocityProvider,
    record: &mut RunRecord,
    opts: &RunOptions,
    until: usize,
) -> Result<()> {
    if !(opts.s > 0.0 && opts.s.is_finite()) {
        return Err(invalid(format!("step size must be positive, got {}", opts.s)));
    }
    if record.s != opts.s {
        return Err(invalid("step size differs from the record being resumed"));
    }
    provider.restore(&record.provider_state)?;
    let outcome = step_until(provider, record, opts, until);
    record.provider_state = provider.state()?;
    outcome
}

fn step_until(provider: &mut dyn VelocityProvider, record: &mut RunRecord, opts: &RunOptions, until: usize) -> Result<()> {
    while record.ensemble.iteration < until.min(opts.iterations) {
        let it = record.ensemble.iteration;
        let (next, eval, fit) = {
            let provided = provider.velocity(&record.ensemble.points, it)?;
            let (next, eval) = euler_step(&record.ensemble, provided.field.as_ref(), opts.s)?;
            (next, eval, provided.fit)
        };
        if let Some(map) = record.map.as_mut() {
            let step = provider
                .map_step()
                .ok_or_else(|| invalid("this method has no particle-independent map to record"))?;
            map.steps.push(step);
        }
        let speed: f64 = eval
            .velocity
            .rows()
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .sum::<f64>()
            / next.len() as f64;
        record.ensemble = next;
        let done = record.ensemble.iteration;
        let mmd2 = match &opts.metric {
            Some(p) if p.every > 0 && (done % p.every == 0 || done == opts.iterations) => {
                Some(p.eval(&record.ensemble.points)?)
            }
            _ => None,
        };
        record.diagnostics.push(IterDiagnostics {
            iteration: done,
            fit_loss: fit.as_ref().and_then(|f| f.bregman.last().copied()),
            penalty: fit.as_ref().and_then(|f| f.penalties.last().copied()),
            total_loss: fit.as_ref().map(|f| f.final_loss),
            grad_norm: eval.mean_grad_norm,
            mean_speed: speed,
            clamped: eval.clamped,
            mmd2,
        });
        if (opts.snapshot_every > 0 && done % opts.snapshot_every == 0) || done == opts.iterations {
            record.push_snapshot();
        }
    }
    Ok(())
}

/// Run a provider for `opts.iterations` Euler steps from `initial`.
pub fn run_transport(provider: &mut dyn VelocityProvider, initial: &Tensor, seed: u64, opts: &RunOptions) -> Result<RunRecord> {
    let mut rec = new_record(provider, initial, opts.s, seed, opts.record_map)?;
    advance(provider, &mut rec, opts)?;
    Ok(rec)
}

// -- configuration --------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Ept,
    MmdFlow,
    Svgd,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Self::Ept => "ept",
            Self::MmdFlow => "mmd-flow",
            Self::Svgd => "svgd",
        }
    }
}

/// Gaussian reference `shift + scale * N(0, I)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSpec {
    pub n: usize,
    #[serde(default)]
    pub shift: f64,
    #[serde(default = "one")]
    pub scale: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSpec {
    pub variant: FitVariant,
    pub alpha: f64,
    #[serde(rename = "T")]
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    #[serde(default = "yes")]
    pub warm_start: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub widths: Vec<usize>,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            widths: vec![64, 64],
            lr: 1e-3,
            batch: 100,
            epochs: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransportSpec {
    pub s: f64,
    #[serde(rename = "K", default)]
    pub iterations: Option<usize>,
    #[serde(rename = "OL", default)]
    pub outer_loops: Option<usize>,
    #[serde(rename = "IL", default)]
    pub inner_loops: Option<usize>,
    #[serde(default)]
    pub latent_dim: Option<usize>,
    #[serde(default)]
    pub generator: Option<GeneratorSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    pub widths: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransportConfig {
    pub dataset: DatasetSpec,
    pub reference: ReferenceSpec,
    #[serde(default = "default_method")]
    pub method: Method,
    /// `chi2 | kl | js | logd` for ratio objectives, `l2` for the density difference.
    pub divergence: String,
    pub objective: ObjectiveSpec,
    pub transport: TransportSpec,
    pub net: NetSpec,
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<String>,
    #[serde(default = "default_snapshot_every")]
    pub snapshot_every: usize,
    /// Kernel bandwidth for the kernel methods; median heuristic when absent.
    #[serde(default)]
    pub kernel_bandwidth: Option<f64>,
    /// Track MMD^2 against a held-out target every this many iterations (0: off).
    #[serde(default)]
    pub metric_every: usize,
    #[serde(default)]
    pub record_map: bool,
}

fn default_method() -> Method {
    Method::Ept
}

fn default_snapshot_every() -> usize {
    100
}

/// Points used for in-run MMD^2 tracking.
pub const METRIC_POINTS: usize = 1000;

impl TransportConfig {
    pub fn energy(&self) -> Result<EnergyFunctional> {
        if self.divergence == "l2" {
            Ok(EnergyFunctional::L2Difference)
        } else {
            Ok(EnergyFunctional::FDivergence(make_f_divergence(&self.divergence)?))
        }
    }

    pub fn is_latent(&self) -> bool {
        self.transport.outer_loops.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(EptError::Config(m));
        self.dataset.validate().map_err(|e| EptError::Config(e.to_string()))?;
        let energy = self.energy().map_err(|e| EptError::Config(e.to_string()))?;
        let diff = self.objective.variant == FitVariant::DensityDiff;
        if diff != (energy == EnergyFunctional::L2Difference) {
            return cfg("the density-difference objective pairs with divergence `l2` and only with it".into());
        }
        FitObjective::new(self.objective.variant, self.objective.alpha)
            .map_err(|e| EptError::Config(e.to_string()))?;
        let t = &self.transport;
        if !(t.s > 0.0 && t.s.is_finite()) {
            return cfg(format!("transport.s must be positive, got {}", t.s));
        }
        if self.reference.n == 0 {
            return cfg("reference.n must be at least 1".into());
        }
        if !(self.reference.scale > 0.0 && self.reference.scale.is_finite() && self.reference.shift.is_finite()) {
            return cfg("reference.scale must be positive and shift finite".into());
        }
        if self.objective.steps == 0 {
            return cfg("objective.T must be at least 1".into());
        }
        if !(self.objective.lr >= 0.0 && self.objective.lr.is_finite()) {
            return cfg("objective.lr must be finite and >= 0".into());
        }
        let b = self.objective.batch;
        if self.method == Method::Ept && (b == 0 || b > self.dataset.n.min(self.reference.n)) {
            return cfg(format!(
                "objective.batch must be in 1..={}",
                self.dataset.n.min(self.reference.n)
            ));
        }
        if self.net.widths.is_empty() || self.net.widths.contains(&0) {
            return cfg("net.widths must be non-empty and positive".into());
        }
        if let Some(h) = self.kernel_bandwidth {
            if !(h > 0.0 && h.is_finite()) {
                return cfg("kernel_bandwidth must be positive".into());
            }
        }
        if self.method == Method::Svgd && AnalyticTarget::for_dataset(&self.dataset.name).is_none() {
            return cfg(format!("svgd needs an analytic target; `{}` has none", self.dataset.name));
        }
        if self.is_latent() {
            if self.method != Method::Ept {
                return cfg("outer loops are only supported for method `ept`".into());
            }
            let (ol, il) = (t.outer_loops.unwrap_or(0), t.inner_loops.unwrap_or(0));
            if ol == 0 || il == 0 {
                return cfg("OL and IL must both be at least 1".into());
            }
            let l = t.latent_dim.ok_or_else(|| EptError::Config("latent_dim is required with OL".into()))?;
            if l == 0 {
                return cfg("latent_dim must be at least 1".into());
            }
            if l >= self.dataset.dim() {
                log::warn!("latent_dim {l} is not below the data dimension {}", self.dataset.dim());
            }
            if let Some(g) = &t.generator {
                if g.batch == 0 || g.batch > self.reference.n || g.epochs == 0 || !(g.lr >= 0.0) {
                    return cfg("generator batch, epochs and lr are out of range".into());
                }
            }
            if self.record_map {
                return cfg("record_map is not available with outer loops".into());
            }
        } else {
            match t.iterations {
                Some(k) if k >= 1 => {}
                _ => return cfg("transport.K must be at least 1".into()),
            }
            if t.inner_loops.is_some() || t.latent_dim.is_some() {
                return cfg("IL and latent_dim need OL".into());
            }
        }
        if self.record_map && self.method != Method::Ept {
            return cfg("record_map is only available for method `ept`".into());
        }
        Ok(())
    }

    pub fn iterations(&self) -> usize {
        match (self.transport.outer_loops, self.transport.inner_loops) {
            (Some(o), Some(i)) => o * i,
            _ => self.transport.iterations.unwrap_or(0),
        }
    }

    /// Target training sample.
    pub fn target(&self) -> Result<Tensor> {
        data::sample(&self.dataset)
    }

    /// Held-out target sample of size `n`, independent of [`Self::target`].
    pub fn heldout_target(&self, n: usize) -> Result<Tensor> {
        let mut spec = self.dataset.clone();
        spec.n = n;
        data::sample_for(&spec, "heldout")
    }

    /// Initial particles.
    pub fn reference(&self) -> Result<Tensor> {
        let r = &self.reference;
        Ok(data::reference_sample(self.dataset.dim(), r.n, self.seed)?.map(|v| r.shift + r.scale * v))
    }

    fn kernel(&self, target: &Tensor, initial: &Tensor) -> Result<RbfKernel> {
        match self.kernel_bandwidth {
            Some(h) => RbfKernel::new(h),
            None => RbfKernel::median(target, initial),
        }
    }

    /// Build the velocity provider for this config.
    pub fn provider(&self, target: &Tensor, initial: &Tensor) -> Result<Box<dyn VelocityProvider>> {
        Ok(match self.method {
            Method::Ept => {
                let o = &self.objective;
                let objective = FitObjective::new(o.variant, o.alpha)?;
                let net = init_scalar_net(self.dataset.dim(), &self.net.widths, self.seed)?;
                let fitter = Fitter::new(objective, net, o.lr, o.batch, target.nrows(), initial.nrows(), self.seed)?;
                Box::new(EptProvider {
                    fitter,
                    energy: self.energy()?,
                    target: target.clone(),
                    steps: o.steps,
                    reinit: (!o.warm_start).then(|| (self.net.widths.clone(), self.seed)),
                })
            }
            Method::MmdFlow => Box::new(MmdFlowProvider {
                kernel: self.kernel(target, initial)?,
                target: target.clone(),
            }),
            Method::Svgd => Box::new(SvgdProvider {
                kernel: self.kernel(target, initial)?,
                score: AnalyticTarget::for_dataset(&self.dataset.name)
                    .ok_or_else(|| EptError::Config("svgd needs an analytic target".into()))?,
            }),
        })
    }

    pub fn run_options(&self, target_for_metric: Option<&Tensor>, initial: &Tensor) -> Result<RunOptions> {
        let metric = match (self.metric_every, target_for_metric) {
            (0, _) | (_, None) => None,
            (every, Some(t)) => Some(MetricProbe {
                kernel: RbfKernel::median(t, initial)?,
                target: t.clone(),
                every,
                max_points: METRIC_POINTS,
            }),
        };
        Ok(RunOptions {
            s: self.transport.s,
            iterations: self.iterations(),
            snapshot_every: self.snapshot_every,
            record_map: self.record_map,
            metric,
        })
    }
}

/// Plain particle transport: fit, build the velocity, step; `K` times.
pub fn run_eptv1(config: &TransportConfig, target: &Tensor) -> Result<RunRecord> {
    let mut rec = start_eptv1(config, target)?;
    resume_eptv1(config, target, &mut rec, config.iterations())?;
    Ok(rec)
}

/// A fresh record for `config`, ready for [`resume_eptv1`].
pub fn start_eptv1(config: &TransportConfig, target: &Tensor) -> Result<RunRecord> {
    config.validate()?;
    if config.is_latent() {
        return Err(EptError::Config("config has outer loops; use run_eptv2".into()));
    }
    let initial = config.reference()?;
    let provider = config.provider(target, &initial)?;
    new_record(provider.as_ref(), &initial, config.transport.s, config.seed, config.record_map)
}

/// Continue `record` up to `until` total iterations.
pub fn resume_eptv1(config: &TransportConfig, target: &Tensor, record: &mut RunRecord, until: usize) -> Result<()> {
    let mut provider = config.provider(target, &record.initial)?;
    let heldout = if config.metric_every > 0 {
        Some(config.heldout_target(METRIC_POINTS)?)
    } else {
        None
    };
    let opts = config.run_options(heldout.as_ref(), &record.initial)?;
    advance_until(provider.as_mut(), record, &opts, until)
}

/// `mean_i |G(z_i) - y_i|^2` and its parameter gradients.
pub fn regression_loss(generator: &GeneratorNet, z: &Tensor, y: &Tensor) -> Result<(f64, Vec<Tensor>)> {
    if z.nrows() != y.nrows() || y.ncols() != generator.output_dim() {
        return Err(shape_err("latents and targets do not pair up"));
    }
    let mut t = Tape::new();
    let params = generator.mlp.bind(&mut t)?;
    let zi = t.input_with(z.clone())?;
    let yc = t.constant(y.clone())?;
    let out = generator.mlp.apply(&mut t, &params, zi)?;
    let d = t.sub(out, yc)?;
    let sq = t.square(d)?;
    let s = t.sum(sq)?;
    let loss = t.scale(s, 1.0 / z.nrows() as f64)?;
    let value = t.value(loss).expect("eager").item();
    let g = t.backward(loss, &Tensor::scalar(1.0))?;
    Ok((
        value,
        params.iter().map(|&p| g.get_or_zeros(p, t.shape(p))).collect(),
    ))
}

/// Minibatch RMSProp regression of `generator` onto `(z, y)` pairs.
pub fn fit_generator(
    generator: &mut GeneratorNet,
    opt: &mut RmsPropState,
    z: &Tensor,
    y: &Tensor,
    batch: usize,
    epochs: usize,
    sampler_seed: u64,
) -> Result<()> {
    let mut sampler = crate::ratio_fit::BatchSampler::new(z.nrows(), batch, sampler_seed, "generator-batches")?;
    let per_epoch = z.nrows() / batch;
    for _ in 0..epochs * per_epoch {
        let idx = sampler.next_indices();
        let (_, g) = regression_loss(generator, &z.select_rows(&idx), &y.select_rows(&idx))?;
        opt.step(generator.mlp.params_mut(), &g)?;
    }
    Ok(())
}

/// Latents for outer loop `outer`.
pub fn latents(seed: u64, n: usize, latent_dim: usize, outer: usize) -> Tensor {
    use rand_distr::{Distribution, StandardNormal};
    let mut r = rng::indexed_stream(seed, "latents", outer as u64);
    let data = (0..n * latent_dim).map(|_| StandardNormal.sample(&mut r)).collect();
    Tensor::new(vec![n, latent_dim], data).expect("latent shape")
}

/// Latent-generator transport: each outer loop draws latents, transports
/// `G(z)` for `IL` iterations, then regresses `G` onto the moved particles.
pub fn run_eptv2(config: &TransportConfig, target: &Tensor) -> Result<(RunRecord, GeneratorNet)> {
    config.validate()?;
    let t = &config.transport;
    let (ol, il, l) = match (t.outer_loops, t.inner_loops, t.latent_dim) {
        (Some(o), Some(i), Some(l)) => (o, i, l),
        _ => return Err(EptError::Config("OL, IL and latent_dim are required".into())),
    };
    let gspec = t.generator.clone().unwrap_or_default();
    let m = config.dataset.dim();
    let n = config.reference.n;
    let mut generator = GeneratorNet::init(l, m, &gspec.widths, config.seed)?;
    let mut gopt = RmsPropState::new(gspec.lr, generator.mlp.params());

    let z0 = latents(config.seed, n, l, 0);
    let initial = generator.generate(&z0)?;
    let mut provider = config.provider(target, &initial)?;
    let mut rec = new_record(provider.as_ref(), &initial, t.s, config.seed, false)?;
    let heldout = if config.metric_every > 0 {
        Some(config.heldout_target(METRIC_POINTS)?)
    } else {
        None
    };
    let base = config.run_options(heldout.as_ref(), &initial)?;
    for outer in 0..ol {
        let z = if outer == 0 { z0.clone() } else { latents(config.seed, n, l, outer) };
        let y = generator.generate(&z)?;
        rec.ensemble.points = y;
        let opts = RunOptions {
            iterations: (outer + 1) * il,
            ..base.clone()
        };
        advance(provider.as_mut(), &mut rec, &opts)?;
        let moved = rec.ensemble.points.clone();
        let (before, _) = regression_loss(&generator, &z, &moved)?;
        let batch = gspec.batch.min(n);
        fit_generator(&mut generator, &mut gopt, &z, &moved, batch, gspec.epochs, config.seed.wrapping_add(outer as u64))?;
        let (after, _) = regression_loss(&generator, &z, &moved)?;
        rec.outer.push(OuterDiagnostics {
            outer,
            regression_before: before,
            regression_after: after,
        });
    }
    rec.generator = Some(generator.clone());
    Ok((rec, generator))
}

/// Outcome of a step-size refinement study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderProbe {
    pub steps: Vec<f64>,
    pub reference_step: f64,
    /// `W2(final(s), final(reference))` per step size.
    pub errors: Vec<f64>,
    /// `log(e_i / e_{i+1}) / log(s_i / s_{i+1})` for successive step sizes.
    pub successive_orders: Vec<f64>,
    /// Least-squares slope of `log e` against `log s`.
    pub fitted_order: Option<f64>,
    /// All errors vanished: the scheme is exact for this field.
    pub exact: bool,
    pub monotone: bool,
}

fn step_count(horizon: f64, s: f64) -> Result<usize> {
    let k = horizon / s;
    let r = k.round();
    if r < 1.0 || (k - r).abs() > 1e-9 * r {
        return Err(invalid(format!("horizon {horizon} is not a multiple of step {s}")));
    }
    Ok(r as usize)
}

/// Integrate the interacting flow `x' = velocity(X)(x)` to `horizon` with
/// each step size and compare against a fine-step reference in W2.
pub fn discretization_order_probe(
    velocity: &dyn Fn(&Tensor) -> Result<Tensor>,
    initial: &Tensor,
    horizon: f64,
    s_list: &[f64],
    reference_step: f64,
) -> Result<OrderProbe> {
    if s_list.is_empty() {
        return Err(invalid("need at least one step size"));
    }
    let integrate = |s: f64| -> Result<Tensor> {
        let mut x = initial.clone();
        for _ in 0..step_count(horizon, s)? {
            let v = velocity(&x)?;
            if let Some(index) = first_nonfinite_row(&v) {
                return Err(EptError::NonFiniteVelocity { index });
            }
            x = x.zip_map(&v, |a, b| a + s * b);
        }
        Ok(x)
    };
    let reference = integrate(reference_step)?;
    let errors: Vec<f64> = s_list
        .iter()
        .map(|&s| wasserstein2_exact(&integrate(s)?, &reference))
        .collect::<Result<_>>()?;
    let exact = errors.iter().all(|&e| e <= 1e-13);
    let successive_orders = errors
        .windows(2)
        .zip(s_list.windows(2))
        .map(|(e, s)| (e[0] / e[1]).ln() / (s[0] / s[1]).ln())
        .collect();
    let monotone = errors.windows(2).zip(s_list.windows(2)).all(|(e, s)| (e[0] >= e[1]) == (s[0] >= s[1]));
    if !monotone {
        log::warn!("discretization errors are not monotone in the step size: {errors:?}");
    }
    let fitted_order = if exact || errors.iter().any(|&e| e <= 0.0) || s_list.len() < 2 {
        None
    } else {
        let xs: Vec<f64> = s_list.iter().map(|s| s.ln()).collect();
        let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
        let k = xs.len() as f64;
        let (mx, my) = (xs.iter().sum::<f64>() / k, ys.iter().sum::<f64>() / k);
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        Some(sxy / sxx)
    };
    Ok(OrderProbe {
        steps: s_list.to_vec(),
        reference_step,
        errors,
        successive_orders,
        fitted_order,
        exact,
        monotone,
    })
}
