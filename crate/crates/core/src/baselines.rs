//! Kernel flows: MMD flow and SVGD, driven by a Gaussian RBF kernel.

use serde::{Deserialize, Serialize};

use crate::data::AnalyticTarget;
use crate::divergences::{FieldEval, Provenance, VelocityField};
use crate::error::{invalid, shape_err, Result};
use crate::parallel::map_row_chunks;
use crate::tensor::Tensor;

/// Points used by [`median_bandwidth`] before subsampling kicks in.
pub const MEDIAN_MAX_POINTS: usize = 1000;

/// `K(x, z) = exp(-|x - z|^2 / (2 h^2))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RbfKernel {
    h: f64,
}

impl RbfKernel {
    pub fn new(h: f64) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(invalid(format!("kernel bandwidth must be positive, got {h}")));
        }
        Ok(Self { h })
    }

    /// Kernel with [`median_bandwidth`] over the pooled samples.
    pub fn median(a: &Tensor, b: &Tensor) -> Result<Self> {
        Self::new(median_bandwidth(a, b)?)
    }

    pub fn bandwidth(&self) -> f64 {
        self.h
    }

    pub fn eval(&self, x: &[f64], z: &[f64]) -> f64 {
        let d2: f64 = x.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
        (-0.5 * d2 / (self.h * self.h)).exp()
    }

    /// `grad_x K(x, z) = -(x - z) / h^2 K(x, z)`.
    pub fn grad_x(&self, x: &[f64], z: &[f64]) -> Vec<f64> {
        let k = self.eval(x, z) / (self.h * self.h);
        x.iter().zip(z).map(|(a, b)| -(a - b) * k).collect()
    }
}

/// Median pairwise Euclidean distance of the pooled samples, on an evenly
/// strided subsample of at most [`MEDIAN_MAX_POINTS`] points. Falls back to
/// 1 when all points coincide.
pub fn median_bandwidth(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.rank() != 2 || b.rank() != 2 || a.ncols() != b.ncols() {
        return Err(shape_err("median heuristic needs matrices of equal width"));
    }
    let pooled: Vec<&[f64]> = a.rows().chain(b.rows()).collect();
    if pooled.len() < 2 {
        return Err(invalid("median heuristic needs at least two points"));
    }
    let take = pooled.len().min(MEDIAN_MAX_POINTS);
    let pts: Vec<&[f64]> = (0..take).map(|i| pooled[i * pooled.len() / take]).collect();
    let mut d = Vec::with_capacity(take * (take - 1) / 2);
    for i in 0..take {
        for j in i + 1..take {
            let s: f64 = pts[i].iter().zip(pts[j]).map(|(x, y)| (x - y) * (x - y)).sum();
            d.push(s.sqrt());
        }
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    let med = if d.len() % 2 == 1 {
        d[mid]
    } else {
        0.5 * (d[mid - 1] + d[mid])
    };
    Ok(if med > 0.0 { med } else { 1.0 })
}

/// Closed-form `grad log p`.
pub trait TargetScore: Send + Sync {
    fn dim(&self) -> usize;
    fn score(&self, xs: &Tensor) -> Result<Tensor>;
}

impl TargetScore for AnalyticTarget {
    fn dim(&self) -> usize {
        AnalyticTarget::dim(self)
    }

    fn score(&self, xs: &Tensor) -> Result<Tensor> {
        crate::data::analytic_score(self, xs)
    }
}

fn check_batch(name: &str, t: &Tensor, m: usize) -> Result<()> {
    if t.rank() != 2 || t.ncols() != m {
        return Err(shape_err(format!("{name}: expected n x {m}, got {:?}", t.shape())));
    }
    if t.nrows() == 0 {
        return Err(invalid(format!("{name} must be non-empty")));
    }
    Ok(())
}

/// `v(x) = mean_i grad_x K(x, X_i) - mean_j grad_x K(x, Y_j)`.
pub fn mmd_flow_velocity(kernel: &RbfKernel, target: &Tensor, particles: &Tensor, query: &Tensor) -> Result<Tensor> {
    let m = target.ncols();
    check_batch("target", target, m)?;
    check_batch("particles", particles, m)?;
    if query.rank() != 2 || query.ncols() != m {
        return Err(shape_err("query dimension differs from samples"));
    }
    let (n_x, n_y) = (target.nrows() as f64, particles.nrows() as f64);
    let h2 = kernel.bandwidth() * kernel.bandwidth();
    let v = map_row_chunks(query, |chunk| {
        let mut out = Vec::with_capacity(chunk.len());
        let mut acc_x = vec![0.0; m];
        let mut acc_y = vec![0.0; m];
        for x in chunk.rows() {
            acc_x.iter_mut().for_each(|a| *a = 0.0);
            acc_y.iter_mut().for_each(|a| *a = 0.0);
            for z in target.rows() {
                let k = kernel.eval(x, z);
                for j in 0..m {
                    acc_x[j] += (z[j] - x[j]) * k;
                }
            }
            for z in particles.rows() {
                let k = kernel.eval(x, z);
                for j in 0..m {
                    acc_y[j] += (z[j] - x[j]) * k;
                }
            }
            out.extend((0..m).map(|j| (acc_x[j] / n_x - acc_y[j] / n_y) / h2));
        }
        Tensor::new(chunk.shape().to_vec(), out)
    })?;
    Ok(v)
}

/// `v(y) = mean_i [K(y, y_i) s(y_i) + grad_{y_i} K(y, y_i)]` with `s` the
/// target score.
pub fn svgd_velocity(kernel: &RbfKernel, score: &dyn TargetScore, particles: &Tensor) -> Result<Tensor> {
    svgd_velocity_at(kernel, score, particles, particles)
}

/// SVGD field induced by `particles`, evaluated at arbitrary `query` points.
pub fn svgd_velocity_at(
    kernel: &RbfKernel,
    score: &dyn TargetScore,
    particles: &Tensor,
    query: &Tensor,
) -> Result<Tensor> {
    let m = score.dim();
    check_batch("particles", particles, m)?;
    if query.rank() != 2 || query.ncols() != m {
        return Err(shape_err("query dimension differs from particles"));
    }
    let scores = score.score(particles)?;
    let n = particles.nrows() as f64;
    let h2 = kernel.bandwidth() * kernel.bandwidth();
    let v = map_row_chunks(query, |chunk| {
        let mut out = Vec::with_capacity(chunk.len());
        let mut acc = vec![0.0; m];
        for y in chunk.rows() {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for (yi, si) in particles.rows().zip(scores.rows()) {
                let k = kernel.eval(y, yi);
                for j in 0..m {
                    acc[j] += k * si[j] + (y[j] - yi[j]) / h2 * k;
                }
            }
            out.extend(acc.iter().map(|a| a / n));
        }
        Tensor::new(chunk.shape().to_vec(), out)
    })?;
    Ok(v)
}

/// MMD flow towards a fixed target sample, driven by a fixed particle set.
pub struct MmdFlowField<'a> {
    pub kernel: RbfKernel,
    pub target: &'a Tensor,
    pub particles: &'a Tensor,
}

impl VelocityField for MmdFlowField<'_> {
    fn eval_detailed(&self, xs: &Tensor) -> Result<FieldEval> {
        Ok(FieldEval {
            velocity: mmd_flow_velocity(&self.kernel, self.target, self.particles, xs)?,
            mean_grad_norm: None,
            clamped: 0,
        })
    }

    fn provenance(&self) -> Provenance {
        Provenance::KernelBaseline
    }
}

pub struct SvgdField<'a> {
    pub kernel: RbfKernel,
    pub score: &'a dyn TargetScore,
    pub particles: &'a Tensor,
}

impl VelocityField for SvgdField<'_> {
    fn eval_detailed(&self, xs: &Tensor) -> Result<FieldEval> {
        Ok(FieldEval {
            velocity: svgd_velocity_at(&self.kernel, self.score, self.particles, xs)?,
            mean_grad_norm: None,
            clamped: 0,
        })
    }

    fn provenance(&self) -> Provenance {
        Provenance::KernelBaseline
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{reference_sample, reference_sample_labeled};
    use crate::metrics::mmd_squared_biased;
    use crate::rng;
    use rand::Rng;

    #[test]
    fn kernel_invariants() {
        let k = RbfKernel::new(0.7).unwrap();
        let mut r = rng::stream(0, "kernel-pairs");
        for _ in 0..100 {
            let x: Vec<f64> = (0..3).map(|_| r.random_range(-3.0..3.0)).collect();
            let z: Vec<f64> = (0..3).map(|_| r.random_range(-3.0..3.0)).collect();
            assert_eq!(k.eval(&x, &x), 1.0);
            assert_eq!(k.eval(&x, &z), k.eval(&z, &x));
            assert!(k.eval(&x, &z) > 0.0);
            let a = k.grad_x(&x, &z);
            let b = k.grad_x(&z, &x);
            for j in 0..3 {
                assert_eq!(a[j], -b[j]);
            }
        }
        assert!(RbfKernel::new(0.0).is_err());
    }

    #[test]
    fn kernel_gradient_sign_matches_finite_differences() {
        let k = RbfKernel::new(1.3).unwrap();
        let (x, z) = ([0.4, -0.2], [1.0, 0.5]);
        let g = k.grad_x(&x, &z);
        let h = 1e-6;
        for j in 0..2 {
            let mut a = x;
            let mut b = x;
            a[j] += h;
            b[j] -= h;
            let fd = (k.eval(&a, &z) - k.eval(&b, &z)) / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn mmd_flow_examples() {
        let k = RbfKernel::new(1.0).unwrap();
        let t = Tensor::from_rows(&[[1.0]]).unwrap();
        let p = Tensor::from_rows(&[[0.0]]).unwrap();
        let v = mmd_flow_velocity(&k, &t, &p, &p).unwrap();
        assert!((v.data()[0] - (-0.5f64).exp()).abs() < 1e-15);

        let same = reference_sample(2, 30, 3).unwrap();
        let v = mmd_flow_velocity(&k, &same, &same, &same).unwrap();
        assert!(v.data().iter().all(|x| x.abs() < 1e-12));

        let a = Tensor::from_rows(&[[0.3, 0.2]]).unwrap();
        let v = mmd_flow_velocity(&k, &a, &a, &a).unwrap();
        assert_eq!(v.data(), &[0.0, 0.0]);
    }

    #[test]
    fn mmd_flow_step_does_not_increase_mmd() {
        for seed in 0..10 {
            let target = reference_sample_labeled(2, 40, seed, "t").unwrap().map(|v| v * 0.5 + 1.0);
            let y = reference_sample_labeled(2, 40, seed, "y").unwrap();
            let k = RbfKernel::median(&target, &y).unwrap();
            let v = mmd_flow_velocity(&k, &target, &y, &y).unwrap();
            let moved = y.zip_map(&v, |a, b| a + 1e-3 * b);
            let before = mmd_squared_biased(&y, &target, &k).unwrap();
            let after = mmd_squared_biased(&moved, &target, &k).unwrap();
            assert!(after <= before + 1e-8, "{after} > {before}");
        }
    }

    #[test]
    fn svgd_single_particle_is_score() {
        let p = AnalyticTarget::standard_normal(1).unwrap();
        let k = RbfKernel::new(0.5).unwrap();
        let y = Tensor::from_rows(&[[2.0]]).unwrap();
        assert_eq!(svgd_velocity(&k, &p, &y).unwrap().data(), &[-2.0]);
    }

    #[test]
    fn svgd_symmetry_and_zero_cases() {
        let p = AnalyticTarget::standard_normal(1).unwrap();
        let k = RbfKernel::new(1.0).unwrap();
        let y = Tensor::from_rows(&[[-0.8], [0.8]]).unwrap();
        let v = svgd_velocity(&k, &p, &y).unwrap();
        assert_eq!(v.data()[0], -v.data()[1]);

        struct Flat;
        impl TargetScore for Flat {
            fn dim(&self) -> usize {
                2
            }
            fn score(&self, xs: &Tensor) -> Result<Tensor> {
                Ok(Tensor::zeros(xs.shape()))
            }
        }
        let y = Tensor::from_rows(&[[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]).unwrap();
        let v = svgd_velocity(&k, &Flat, &y).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn median_bandwidth_simple() {
        let a = Tensor::from_rows(&[[0.0], [1.0]]).unwrap();
        let b = Tensor::from_rows(&[[3.0]]).unwrap();
        // distances 1, 3, 2
        assert_eq!(median_bandwidth(&a, &b).unwrap(), 2.0);
        let z = Tensor::zeros(&[3, 2]);
        assert_eq!(median_bandwidth(&z, &z).unwrap(), 1.0);
    }
}
