//! Multilayer perceptrons and the RMSProp optimizer.
//!
//! Layers compute `x W + b` with `W` stored as `fan_in x fan_out`. Hidden
//! layers use ReLU; the output layer is linear.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, shape_err, EptError, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    /// Full layer widths: input, hidden..., output.
    widths: Vec<usize>,
    /// `w0, b0, w1, b1, ...`
    params: Vec<Tensor>,
}

impl Mlp {
    /// He-style uniform initialisation, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`,
    /// with zero biases.
    pub fn init(widths: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if widths.len() < 2 {
            return Err(invalid("an MLP needs at least input and output widths"));
        }
        if widths.contains(&0) {
            return Err(invalid(format!("zero-width layer in {widths:?}")));
        }
        let mut params = Vec::with_capacity(2 * (widths.len() - 1));
        for pair in widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
            params.push(Tensor::new(vec![fan_in, fan_out], w)?);
            params.push(Tensor::zeros(&[fan_out]));
        }
        Ok(Self {
            widths: widths.to_vec(),
            params,
        })
    }

    pub fn from_params(widths: &[usize], params: Vec<Tensor>) -> Result<Self> {
        if widths.len() < 2 || params.len() != 2 * (widths.len() - 1) {
            return Err(invalid("parameter list does not match layer widths"));
        }
        for (l, pair) in widths.windows(2).enumerate() {
            if params[2 * l].shape() != [pair[0], pair[1]] || params[2 * l + 1].shape() != [pair[1]] {
                return Err(shape_err(format!("layer {l} parameters do not match {pair:?}")));
            }
        }
        Ok(Self {
            widths: widths.to_vec(),
            params,
        })
    }

    pub fn zeros(widths: &[usize]) -> Result<Self> {
        let params = widths
            .windows(2)
            .flat_map(|p| [Tensor::zeros(&[p[0], p[1]]), Tensor::zeros(&[p[1]])])
            .collect();
        Self::from_params(widths, params)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Register the parameters on a tape as trainable leaves.
    pub fn bind(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.params.iter().map(|p| tape.param(p.clone())).collect()
    }

    /// Register the parameters as constants (no parameter gradients needed).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.params.iter().map(|p| tape.constant(p.clone())).collect()
    }

    /// Build the network on `x` (`n x input_dim`) using bound parameters.
    pub fn apply(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        let s = tape.shape(x);
        if s.len() != 2 || s[1] != self.input_dim() {
            return Err(shape_err(format!(
                "network expects n x {}, got {s:?}",
                self.input_dim()
            )));
        }
        let layers = self.widths.len() - 1;
        let mut h = x;
        for l in 0..layers {
            let z = tape.matmul(h, params[2 * l])?;
            h = tape.add_bias(z, params[2 * l + 1])?;
            if l + 1 < layers {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Batch forward pass, `n x output_dim`.
    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.bind_frozen(&mut tape)?;
        let x = tape.input_with(xs.clone())?;
        let out = self.apply(&mut tape, &params, x)?;
        Ok(tape.value(out).cloned().expect("eager forward"))
    }
}

fn check_batch(xs: &Tensor, m: usize) -> Result<()> {
    if xs.rank() != 2 || xs.ncols() != m {
        return Err(shape_err(format!("expected n x {m} batch, got {:?}", xs.shape())));
    }
    xs.ensure_finite("network input")
}

/// Scalar-valued fields with input gradients, evaluated on batches.
pub trait ScalarField: Sync {
    fn dim(&self) -> usize;

    /// Values (`n`) and input gradients (`n x dim`) at each row of `xs`.
    fn value_and_grad(&self, xs: &Tensor) -> Result<(Tensor, Tensor)>;
}

/// The density-ratio (or difference) network `R: R^m -> R`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarFieldNet {
    pub mlp: Mlp,
}

/// New ratio network with the given hidden widths.
pub fn init_scalar_net(m: usize, widths: &[usize], seed: u64) -> Result<ScalarFieldNet> {
    if m == 0 {
        return Err(invalid("input dimension must be at least 1"));
    }
    if widths.is_empty() {
        return Err(invalid("hidden widths must be non-empty"));
    }
    let mut full = vec![m];
    full.extend_from_slice(widths);
    full.push(1);
    let mut r = rng::stream(seed, "scalar-net-init");
    Ok(ScalarFieldNet {
        mlp: Mlp::init(&full, &mut r)?,
    })
}

impl ScalarFieldNet {
    pub fn from_mlp(mlp: Mlp) -> Result<Self> {
        if mlp.output_dim() != 1 {
            return Err(invalid("scalar field network must have output width 1"));
        }
        Ok(Self { mlp })
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn param_count(&self) -> usize {
        self.mlp.param_count()
    }

    /// Per-row outputs, shape `(n,)`.
    pub fn eval_batch(&self, xs: &Tensor) -> Result<Tensor> {
        check_batch(xs, self.input_dim())?;
        let n = xs.nrows();
        self.mlp.forward(xs)?.reshape(vec![n])
    }

    /// Build `R(x)` on a tape as an `(n,)` vector.
    pub fn apply(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        let n = tape.shape(x)[0];
        let out = self.mlp.apply(tape, params, x)?;
        tape.reshape(out, &[n])
    }
}

impl ScalarField for ScalarFieldNet {
    fn dim(&self) -> usize {
        self.input_dim()
    }

    fn value_and_grad(&self, xs: &Tensor) -> Result<(Tensor, Tensor)> {
        check_batch(xs, self.input_dim())?;
        let mut tape = Tape::new();
        let params = self.mlp.bind_frozen(&mut tape)?;
        let x = tape.input_with(xs.clone())?;
        let r = self.apply(&mut tape, &params, x)?;
        let total = tape.sum(r)?;
        let grads = tape.backward(total, &Tensor::scalar(1.0))?;
        let values = tape.value(r).cloned().expect("eager forward");
        Ok((values, grads.get_or_zeros(x, xs.shape())))
    }
}

/// Generator `G: R^latent -> R^m` for the latent-structure variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorNet {
    pub mlp: Mlp,
}

impl GeneratorNet {
    pub fn init(latent_dim: usize, output_dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        if latent_dim == 0 || output_dim == 0 {
            return Err(invalid("generator dimensions must be positive"));
        }
        let mut full = vec![latent_dim];
        full.extend_from_slice(hidden);
        full.push(output_dim);
        let mut r = rng::stream(seed, "generator-init");
        Ok(Self {
            mlp: Mlp::init(&full, &mut r)?,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    pub fn generate(&self, zs: &Tensor) -> Result<Tensor> {
        check_batch(zs, self.latent_dim())?;
        self.mlp.forward(zs)
    }
}

/// RMSProp: `acc <- rho acc + (1 - rho) g^2`, `p <- p - lr g / sqrt(acc + eps)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsPropState {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    acc: Vec<Tensor>,
}

impl RmsPropState {
    pub const DEFAULT_RHO: f64 = 0.99;
    pub const DEFAULT_EPS: f64 = 1e-8;

    pub fn new(lr: f64, params: &[Tensor]) -> Self {
        Self::with_constants(lr, Self::DEFAULT_RHO, Self::DEFAULT_EPS, params)
    }

    pub fn with_constants(lr: f64, rho: f64, eps: f64, params: &[Tensor]) -> Self {
        Self {
            lr,
            rho,
            eps,
            acc: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn accumulators(&self) -> &[Tensor] {
        &self.acc
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.acc.len() || grads.len() != self.acc.len() {
            return Err(shape_err("optimizer state, params and grads differ in length"));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != self.acc[i].shape() || params[i].shape() != g.shape() {
                return Err(shape_err(format!("gradient {i} shape mismatch")));
            }
            if !g.is_finite() {
                return Err(EptError::NonFinite {
                    context: format!("gradient of parameter {i}"),
                });
            }
        }
        let (lr, rho, eps) = (self.lr, self.rho, self.eps);
        for ((p, a), g) in params.iter_mut().zip(&mut self.acc).zip(grads) {
            for ((pv, av), &gv) in p.data_mut().iter_mut().zip(a.data_mut()).zip(g.data()) {
                *av = rho * *av + (1.0 - rho) * gv * gv;
                *pv -= lr * gv / (*av + eps).sqrt();
            }
        }
        Ok(())
    }
}
