//! Sample-based discrepancies, kernel density estimates and run diagnostics.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::baselines::RbfKernel;
use crate::divergences::{FDivergence, FieldEval, Provenance, VelocityField};
use crate::error::{invalid, shape_err, EptError, Result};
use crate::nets::ScalarField;
use crate::tensor::Tensor;
use crate::transport::RunRecord;

/// Largest sample size accepted by [`wasserstein2_exact`].
pub const W2_SIZE_CAP: usize = 2000;

/// Denominator floor used by [`kde_ratio_oracle`].
pub const KDE_RATIO_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub n_x: usize,
    pub n_y: usize,
    /// Kernel bandwidth for MMD, `None` for W2.
    pub bandwidth: Option<f64>,
}

fn check_same_dim(x: &Tensor, y: &Tensor) -> Result<()> {
    if x.rank() != 2 || y.rank() != 2 || x.ncols() != y.ncols() {
        return Err(shape_err(format!(
            "samples must be matrices of equal width: {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    Ok(())
}

fn kernel_sum(a: &Tensor, b: &Tensor, k: &RbfKernel, skip_diagonal: bool) -> f64 {
    let mut total = 0.0;
    for (i, ra) in a.rows().enumerate() {
        let mut row = 0.0;
        for (j, rb) in b.rows().enumerate() {
            if skip_diagonal && i == j {
                continue;
            }
            row += k.eval(ra, rb);
        }
        total += row;
    }
    total
}

/// Unbiased U-statistic estimate of MMD^2.
pub fn mmd_squared(x: &Tensor, y: &Tensor, kernel: &RbfKernel) -> Result<f64> {
    check_same_dim(x, y)?;
    let (n, m) = (x.nrows(), y.nrows());
    if n < 2 || m < 2 {
        return Err(invalid("MMD^2 needs at least two points per sample"));
    }
    let kxx = kernel_sum(x, x, kernel, true) / (n * (n - 1)) as f64;
    let kyy = kernel_sum(y, y, kernel, true) / (m * (m - 1)) as f64;
    let kxy = kernel_sum(x, y, kernel, false) / (n * m) as f64;
    Ok(kxx + kyy - 2.0 * kxy)
}

/// Biased V-statistic estimate of MMD^2; exactly zero for identical samples
/// up to rounding.
pub fn mmd_squared_biased(x: &Tensor, y: &Tensor, kernel: &RbfKernel) -> Result<f64> {
    check_same_dim(x, y)?;
    let (n, m) = (x.nrows(), y.nrows());
    if n == 0 || m == 0 {
        return Err(invalid("MMD^2 needs non-empty samples"));
    }
    let kxx = kernel_sum(x, x, kernel, false) / (n * n) as f64;
    let kyy = kernel_sum(y, y, kernel, false) / (m * m) as f64;
    let kxy = kernel_sum(x, y, kernel, false) / (n * m) as f64;
    Ok(kxx + kyy - 2.0 * kxy)
}

/// Minimum-cost perfect matching on a dense `n x n` cost matrix
/// (shortest augmenting paths with potentials). Returns `col[row]`.
pub fn min_cost_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            let row = &cost[(i0 - 1) * n..i0 * n];
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = row[j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            col[p[j] - 1] = j - 1;
        }
    }
    col
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Exact W2 between two equal-size empirical measures.
pub fn wasserstein2_exact(x: &Tensor, y: &Tensor) -> Result<f64> {
    check_same_dim(x, y)?;
    let n = x.nrows();
    if n != y.nrows() {
        return Err(invalid(format!(
            "W2 needs equal sample sizes, got {n} and {}",
            y.nrows()
        )));
    }
    if n > W2_SIZE_CAP {
        return Err(EptError::SizeCap(format!(
            "W2 is limited to {W2_SIZE_CAP} points, got {n}"
        )));
    }
    if n == 0 {
        return Err(invalid("W2 needs non-empty samples"));
    }
    let mut cost = Vec::with_capacity(n * n);
    for a in x.rows() {
        for b in y.rows() {
            cost.push(sq_dist(a, b));
        }
    }
    let col = min_cost_assignment(&cost, n);
    let total: f64 = col.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Ok((total / n as f64).sqrt())
}

/// KDE bandwidth choice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Bandwidth {
    /// Silverman's rule per dimension.
    Silverman,
    /// One bandwidth per dimension (a single value is broadcast).
    Fixed(Vec<f64>),
}

/// `h_j = sigma_j (4 / ((d + 2) n))^(1 / (d + 4))`.
pub fn silverman_bandwidths(samples: &Tensor) -> Vec<f64> {
    let (n, d) = (samples.nrows(), samples.ncols());
    let factor = (4.0 / ((d as f64 + 2.0) * n as f64)).powf(1.0 / (d as f64 + 4.0));
    (0..d)
        .map(|j| {
            let mean = samples.rows().map(|r| r[j]).sum::<f64>() / n as f64;
            let var = samples.rows().map(|r| (r[j] - mean).powi(2)).sum::<f64>()
                / (n.max(2) - 1) as f64;
            let h = var.sqrt() * factor;
            if h > 0.0 {
                h
            } else {
                1.0
            }
        })
        .collect()
}

fn resolve_bandwidth(samples: &Tensor, bw: &Bandwidth) -> Result<Vec<f64>> {
    let d = samples.ncols();
    let h = match bw {
        Bandwidth::Silverman => silverman_bandwidths(samples),
        Bandwidth::Fixed(h) if h.len() == 1 => vec![h[0]; d],
        Bandwidth::Fixed(h) if h.len() == d => h.clone(),
        Bandwidth::Fixed(h) => {
            return Err(invalid(format!("{} bandwidths for {d} dimensions", h.len())))
        }
    };
    if h.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(invalid("bandwidths must be positive"));
    }
    Ok(h)
}

/// Gaussian product-kernel density estimate with per-dimension bandwidths.
#[derive(Clone, Debug)]
pub struct Kde {
    samples: Tensor,
    bandwidths: Vec<f64>,
    log_norm: f64,
}

impl Kde {
    pub fn new(samples: &Tensor, bw: &Bandwidth) -> Result<Self> {
        if samples.rank() != 2 || samples.nrows() == 0 {
            return Err(invalid("KDE needs a non-empty sample"));
        }
        let bandwidths = resolve_bandwidth(samples, bw)?;
        let d = samples.ncols() as f64;
        let log_norm = -0.5 * d * (2.0 * PI).ln() - bandwidths.iter().map(|h| h.ln()).sum::<f64>();
        Ok(Self {
            samples: samples.clone(),
            bandwidths,
            log_norm,
        })
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    fn kernel_terms(&self, x: &[f64], mut each: impl FnMut(f64, &[f64])) {
        let norm = self.log_norm.exp();
        for s in self.samples.rows() {
            let q: f64 = x
                .iter()
                .zip(s)
                .zip(&self.bandwidths)
                .map(|((a, b), h)| ((a - b) / h).powi(2))
                .sum();
            each(norm * (-0.5 * q).exp(), s);
        }
    }

    pub fn density_at(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        self.kernel_terms(x, |k, _| acc += k);
        acc / self.samples.nrows() as f64
    }

    /// Density and its gradient at `x`.
    pub fn density_and_grad_at(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let mut acc = 0.0;
        let mut grad = vec![0.0; x.len()];
        let h2: Vec<f64> = self.bandwidths.iter().map(|h| h * h).collect();
        self.kernel_terms(x, |k, s| {
            acc += k;
            for j in 0..x.len() {
                grad[j] -= k * (x[j] - s[j]) / h2[j];
            }
        });
        let n = self.samples.nrows() as f64;
        (acc / n, grad.into_iter().map(|g| g / n).collect())
    }

    pub fn density(&self, query: &Tensor) -> Result<Tensor> {
        if query.rank() != 2 || query.ncols() != self.samples.ncols() {
            return Err(shape_err("query dimension differs from KDE sample"));
        }
        Ok(Tensor::vector(
            query.rows().map(|r| self.density_at(r)).collect(),
        ))
    }
}

pub fn kde_density(samples: &Tensor, query: &Tensor, bw: &Bandwidth) -> Result<Tensor> {
    Kde::new(samples, bw)?.density(query)
}

/// Ratio of particle KDE to target KDE at `query`, with the denominator
/// floored at [`KDE_RATIO_FLOOR`].
#[derive(Clone, Debug)]
pub struct KdeRatio {
    pub numerator: Kde,
    pub denominator: Kde,
}

#[derive(Clone, Debug)]
pub struct RatioEstimate {
    pub ratio: Tensor,
    pub floor_hits: usize,
}

impl KdeRatio {
    pub fn new(particles: &Tensor, target: &Tensor, bw_particles: &Bandwidth, bw_target: &Bandwidth) -> Result<Self> {
        check_same_dim(particles, target)?;
        Ok(Self {
            numerator: Kde::new(particles, bw_particles)?,
            denominator: Kde::new(target, bw_target)?,
        })
    }

    pub fn estimate(&self, query: &Tensor) -> Result<RatioEstimate> {
        let num = self.numerator.density(query)?;
        let den = self.denominator.density(query)?;
        let ratio = num.zip_map(&den, |a, b| a / b.max(KDE_RATIO_FLOOR));
        let floor_hits = den.data().iter().filter(|&&b| b < KDE_RATIO_FLOOR).count();
        if floor_hits > 0 {
            log::debug!("kde ratio: denominator floor engaged at {floor_hits} points");
        }
        Ok(RatioEstimate { ratio, floor_hits })
    }
}

impl ScalarField for KdeRatio {
    fn dim(&self) -> usize {
        self.numerator.samples.ncols()
    }

    fn value_and_grad(&self, xs: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut values = Vec::with_capacity(xs.nrows());
        let mut grads = Vec::with_capacity(xs.len());
        for x in xs.rows() {
            let (q, gq) = self.numerator.density_and_grad_at(x);
            let (p, gp) = self.denominator.density_and_grad_at(x);
            if p < KDE_RATIO_FLOOR {
                values.push(q / KDE_RATIO_FLOOR);
                grads.extend(gq.iter().map(|g| g / KDE_RATIO_FLOOR));
            } else {
                values.push(q / p);
                grads.extend(gq.iter().zip(&gp).map(|(a, b)| (a * p - q * b) / (p * p)));
            }
        }
        Ok((Tensor::vector(values), Tensor::new(xs.shape().to_vec(), grads)?))
    }
}

pub fn kde_ratio_oracle(
    particles: &Tensor,
    target: &Tensor,
    query: &Tensor,
    bw_particles: &Bandwidth,
    bw_target: &Bandwidth,
) -> Result<RatioEstimate> {
    KdeRatio::new(particles, target, bw_particles, bw_target)?.estimate(query)
}

/// Velocity `-f''(r) grad r` with `r` the KDE ratio of particles to target.
pub struct KdeRatioVelocity {
    pub divergence: FDivergence,
    pub ratio: KdeRatio,
}

impl VelocityField for KdeRatioVelocity {
    fn eval_detailed(&self, xs: &Tensor) -> Result<FieldEval> {
        crate::divergences::ratio_field_eval(self.divergence, &self.ratio, xs)
    }

    fn provenance(&self) -> Provenance {
        Provenance::Oracle
    }
}

/// Plug-in estimate of `D_f(q || p) = E_p f(r)`, averaging `f(r_hat)` over
/// the target sample.
pub fn plugin_f_divergence(f: FDivergence, ratio: &KdeRatio, target: &Tensor) -> Result<f64> {
    let est = ratio.estimate(target)?;
    Ok(est.ratio.data().iter().map(|&r| f.f(r.max(0.0))).sum::<f64>() / target.nrows() as f64)
}

/// Per-iteration diagnostics ready for plotting.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticsTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl DiagnosticsTable {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for r in &self.rows {
            let cells: Vec<String> = r
                .iter()
                .zip(&self.columns)
                .map(|(v, c)| match c.as_str() {
                    "iter" | "clamped" if v.fract() == 0.0 => format!("{v:.0}"),
                    _ => fmt_float(*v),
                })
                .collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// Round-trip float formatting (17 significant digits).
pub fn fmt_float(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else if v == 0.0 {
        if v.is_sign_negative() { "-0" } else { "0" }.to_string()
    } else {
        format!("{v:.16e}")
    }
}

pub fn diagnostics_series(run: &RunRecord) -> DiagnosticsTable {
    let columns = [
        "iter",
        "fit_loss",
        "penalty",
        "total_loss",
        "grad_norm",
        "mean_speed",
        "clamped",
        "mmd2",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let rows = run
        .diagnostics
        .iter()
        .map(|d| {
            vec![
                d.iteration as f64,
                d.fit_loss.unwrap_or(f64::NAN),
                d.penalty.unwrap_or(f64::NAN),
                d.total_loss.unwrap_or(f64::NAN),
                d.grad_norm.unwrap_or(f64::NAN),
                d.mean_speed,
                d.clamped as f64,
                d.mmd2.unwrap_or(f64::NAN),
            ]
        })
        .collect();
    DiagnosticsTable { columns, rows }
}
