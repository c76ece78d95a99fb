//! Oracles shared by the integration and acceptance tests.

#![allow(dead_code)]

use ept_core::autodiff::{Tape, Var};
use ept_core::nets::{init_scalar_net, ScalarField, ScalarFieldNet};
use ept_core::ratio_fit::{density_diff_loss, lr_loss, lsdr_loss, LossEval};
use ept_core::{Result, Tensor};
use rand::Rng;

/// Step for central differences.
pub const FD_STEP: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm; 0 when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Central-difference gradient of `f` at `x`.
pub fn fd_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn random_tensor(r: &mut (impl Rng + ?Sized), shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// Values with `|v|` in `[lo, hi]` and random signs.
pub fn random_away_from_zero(r: &mut (impl Rng + ?Sized), shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = r.random_range(lo..hi);
            if r.random_bool(0.5) { v } else { -v }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

type Build = fn(&mut Tape, &[Var]) -> Result<Var>;
type Gen = fn(&mut dyn rand::RngCore) -> Vec<Tensor>;

/// One differentiable primitive with an input generator on its smooth domain.
pub struct Primitive {
    pub name: &'static str,
    pub gen: Gen,
    pub build: Build,
    /// Whether the second derivative exists on the generated domain.
    pub smooth: bool,
}

fn dims(r: &mut dyn rand::RngCore) -> (usize, usize, usize) {
    (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5))
}

fn gen_unary(r: &mut dyn rand::RngCore) -> Vec<Tensor> {
    let (n, m, _) = dims(r);
    vec![random_tensor(r, &[n, m], -2.0, 2.0)]
}

fn gen_positive(r: &mut dyn rand::RngCore) -> Vec<Tensor> {
    let (n, m, _) = dims(r);
    vec![random_tensor(r, &[n, m], 0.2, 3.0)]
}

fn gen_kinked(r: &mut dyn rand::RngCore) -> Vec<Tensor> {
    let (n, m, _) = dims(r);
    vec![random_away_from_zero(r, &[n, m], 0.05, 2.0)]
}

fn gen_pair(r: &mut dyn rand::RngCore) -> Vec<Tensor> {
    let (n, m, _) = dims(r);
    vec![random_tensor(r, &[n, m], -2.0, 2.0), random_tensor(r, &[n, m], -2.0, 2.0)]
}

fn gen_quotient(r: &mut dyn rand::RngCore) -> Vec<Tensor> {
    let (n, m, _) = dims(r);
    vec![random_tensor(r, &[n, m], -2.0, 2.0), random_tensor(r, &[n, m], 0.5, 2.0)]
}

fn gen_matmul(r: &mut dyn rand::RngCore) -> Vec<Tensor> {
    let (n, k, m) = dims(r);
    vec![random_tensor(r, &[n, k], -1.0, 1.0), random_tensor(r, &[k, m], -1.0, 1.0)]
}

fn gen_matmul_tt(r: &mut dyn rand::RngCore) -> Vec<Tensor> {
    let (n, k, m) = dims(r);
    vec![random_tensor(r, &[k, n], -1.0, 1.0), random_tensor(r, &[m, k], -1.0, 1.0)]
}

fn gen_bias(r: &mut dyn rand::RngCore) -> Vec<Tensor> {
    let (n, m, _) = dims(r);
    vec![random_tensor(r, &[n, m], -1.0, 1.0), random_tensor(r, &[m], -1.0, 1.0)]
}

fn gen_vector(r: &mut dyn rand::RngCore) -> Vec<Tensor> {
    let (n, _, _) = dims(r);
    vec![random_tensor(r, &[n], -1.0, 1.0)]
}

fn gen_scalar(r: &mut dyn rand::RngCore) -> Vec<Tensor> {
    vec![Tensor::scalar(r.random_range(-2.0..2.0))]
}

/// Every primitive of the tape, each wrapped so its smooth pieces are
/// exercised (products keep second derivatives non-trivial).
pub fn primitives() -> Vec<Primitive> {
    vec![
        Primitive { name: "matmul", gen: gen_matmul, build: |t, v| t.matmul(v[0], v[1]), smooth: true },
        Primitive { name: "matmul_tt", gen: gen_matmul_tt, build: |t, v| t.matmul_t(v[0], v[1], true, true), smooth: true },
        Primitive {
            name: "matmul_self",
            gen: gen_unary,
            build: |t, v| t.matmul_t(v[0], v[0], true, false),
            smooth: true,
        },
        Primitive { name: "add_bias", gen: gen_bias, build: |t, v| t.add_bias(v[0], v[1]), smooth: true },
        Primitive {
            name: "sum_rows",
            gen: gen_unary,
            build: |t, v| {
                let s = t.square(v[0])?;
                t.sum_rows(s)
            },
            smooth: true,
        },
        Primitive {
            name: "broadcast_rows",
            gen: gen_vector,
            build: |t, v| {
                let b = t.broadcast_rows(v[0], 3)?;
                t.square(b)
            },
            smooth: true,
        },
        Primitive {
            name: "sum_cols",
            gen: gen_unary,
            build: |t, v| {
                let s = t.square(v[0])?;
                t.sum_cols(s)
            },
            smooth: true,
        },
        Primitive {
            name: "broadcast_cols",
            gen: gen_vector,
            build: |t, v| {
                let b = t.broadcast_cols(v[0], 2)?;
                t.square(b)
            },
            smooth: true,
        },
        Primitive {
            name: "sum",
            gen: gen_unary,
            build: |t, v| {
                let s = t.sum(v[0])?;
                t.square(s)
            },
            smooth: true,
        },
        Primitive {
            name: "mean",
            gen: gen_unary,
            build: |t, v| {
                let s = t.mean(v[0])?;
                t.square(s)
            },
            smooth: true,
        },
        Primitive {
            name: "fill",
            gen: gen_scalar,
            build: |t, v| {
                let f = t.fill(v[0], &[2, 3])?;
                t.square(f)
            },
            smooth: true,
        },
        Primitive {
            name: "reshape",
            gen: gen_unary,
            build: |t, v| {
                let n: usize = t.shape(v[0]).iter().product();
                let r = t.reshape(v[0], &[n])?;
                t.square(r)
            },
            smooth: true,
        },
        Primitive { name: "add", gen: gen_pair, build: |t, v| t.add(v[0], v[1]), smooth: true },
        Primitive { name: "sub", gen: gen_pair, build: |t, v| t.sub(v[0], v[1]), smooth: true },
        Primitive { name: "mul", gen: gen_pair, build: |t, v| t.mul(v[0], v[1]), smooth: true },
        Primitive { name: "div", gen: gen_quotient, build: |t, v| t.div(v[0], v[1]), smooth: true },
        Primitive {
            name: "scale",
            gen: gen_unary,
            build: |t, v| {
                let s = t.scale(v[0], -1.7)?;
                t.square(s)
            },
            smooth: true,
        },
        Primitive {
            name: "neg",
            gen: gen_unary,
            build: |t, v| {
                let s = t.neg(v[0])?;
                t.mul(s, v[0])
            },
            smooth: true,
        },
        Primitive {
            name: "add_scalar",
            gen: gen_unary,
            build: |t, v| {
                let s = t.add_scalar(v[0], 0.3)?;
                t.square(s)
            },
            smooth: true,
        },
        Primitive { name: "square", gen: gen_unary, build: |t, v| t.square(v[0]), smooth: true },
        Primitive {
            name: "relu",
            gen: gen_kinked,
            build: |t, v| {
                let r = t.relu(v[0])?;
                t.mul(r, v[0])
            },
            smooth: true,
        },
        Primitive { name: "exp", gen: gen_unary, build: |t, v| t.exp(v[0]), smooth: true },
        Primitive { name: "ln", gen: gen_positive, build: |t, v| t.ln(v[0]), smooth: true },
        Primitive { name: "softplus", gen: gen_unary, build: |t, v| t.softplus(v[0]), smooth: true },
        Primitive { name: "sigmoid", gen: gen_unary, build: |t, v| t.sigmoid(v[0]), smooth: true },
    ]
}

fn bind(t: &mut Tape, xs: &[Tensor]) -> Vec<Var> {
    xs.iter().map(|x| t.param(x.clone()).unwrap()).collect()
}

/// `sum(w * op(xs))` and its gradients.
fn first_order(p: &Primitive, xs: &[Tensor], w: &Tensor) -> (f64, Vec<Tensor>) {
    let mut t = Tape::new();
    let vars = bind(&mut t, xs);
    let out = (p.build)(&mut t, &vars).unwrap();
    let wc = t.constant(w.clone()).unwrap();
    let prod = t.mul(out, wc).unwrap();
    let l = t.sum(prod).unwrap();
    let val = t.value(l).unwrap().item();
    let g = t.backward(l, &Tensor::scalar(1.0)).unwrap();
    (val, vars.iter().map(|&v| g.get_or_zeros(v, t.shape(v))).collect())
}

/// `sum_k <u_k, grad_k sum(w * op(xs))>` built on the tape, and its gradients.
fn second_order(p: &Primitive, xs: &[Tensor], w: &Tensor, u: &[Tensor]) -> (f64, Vec<Tensor>) {
    let mut t = Tape::new();
    let vars = bind(&mut t, xs);
    let out = (p.build)(&mut t, &vars).unwrap();
    let wc = t.constant(w.clone()).unwrap();
    let prod = t.mul(out, wc).unwrap();
    let l = t.sum(prod).unwrap();
    let gs = t.grad(l, &vars).unwrap();
    let mut acc: Option<Var> = None;
    for (g, uk) in gs.iter().zip(u) {
        let uc = t.constant(uk.clone()).unwrap();
        let m = t.mul(*g, uc).unwrap();
        let s = t.sum(m).unwrap();
        acc = Some(match acc {
            None => s,
            Some(a) => t.add(a, s).unwrap(),
        });
    }
    let l2 = acc.unwrap();
    let val = t.value(l2).unwrap().item();
    let g = t.backward(l2, &Tensor::scalar(1.0)).unwrap();
    (val, vars.iter().map(|&v| g.get_or_zeros(v, t.shape(v))).collect())
}

fn flatten(ts: &[Tensor]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn unflatten(like: &[Tensor], flat: &[f64]) -> Vec<Tensor> {
    let mut off = 0;
    like.iter()
        .map(|t| {
            let n = t.len();
            let out = Tensor::new(t.shape().to_vec(), flat[off..off + n].to_vec()).unwrap();
            off += n;
            out
        })
        .collect()
}

fn output_shape(p: &Primitive, xs: &[Tensor]) -> Vec<usize> {
    let mut t = Tape::new();
    let vars = bind(&mut t, xs);
    let out = (p.build)(&mut t, &vars).unwrap();
    t.shape(out).to_vec()
}

/// Relative errors of the first- and second-order gradients of one random
/// instance of `p` against central differences.
pub fn check_primitive(p: &Primitive, r: &mut dyn rand::RngCore) -> (f64, f64) {
    let xs = (p.gen)(r);
    let w = random_tensor(r, &output_shape(p, &xs), -1.0, 1.0);
    let (_, g) = first_order(p, &xs, &w);
    let x0 = flatten(&xs);
    let fd = fd_grad(&mut |x| first_order(p, &unflatten(&xs, x), &w).0, &x0, FD_STEP);
    let e1 = rel_err(&flatten(&g), &fd);

    let u: Vec<Tensor> = xs.iter().map(|x| random_tensor(r, x.shape(), -1.0, 1.0)).collect();
    let (_, g2) = second_order(p, &xs, &w, &u);
    let fd2 = fd_grad(&mut |x| second_order(p, &unflatten(&xs, x), &w, &u).0, &x0, FD_STEP);
    let e2 = rel_err(&flatten(&g2), &fd2);
    (e1, e2)
}

/// Which gradient-penalised objective to check.
#[derive(Clone, Copy, Debug)]
pub enum Objective {
    Lsdr,
    Lr,
    DensityDiff,
}

fn objective(o: Objective, net: &ScalarFieldNet, x: &Tensor, y: &Tensor, alpha: f64) -> LossEval {
    match o {
        Objective::Lsdr => lsdr_loss(net, x, y, alpha),
        Objective::Lr => lr_loss(net, x, y, alpha),
        Objective::DensityDiff => {
            let w = Tensor::vstack(&[x, y]).unwrap();
            density_diff_loss(net, x, y, &w, alpha)
        }
    }
    .unwrap()
}

fn with_params(net: &ScalarFieldNet, flat: &[f64]) -> ScalarFieldNet {
    let mut n = net.clone();
    let params = unflatten(n.mlp.params(), flat);
    for (dst, src) in n.mlp.params_mut().iter_mut().zip(params) {
        *dst = src;
    }
    n
}

/// Relative error of the parameter gradient of a penalised objective along a
/// random direction, against a central difference.
pub fn check_penalty_gradient(o: Objective, r: &mut dyn rand::RngCore) -> f64 {
    let m = r.random_range(1..4);
    let h1 = r.random_range(2..7);
    let h2 = r.random_range(2..7);
    let mut net = init_scalar_net(m, &[h1, h2], r.next_u64()).unwrap();
    // Zero biases put dead rows exactly on a kink; draw generic ones.
    for (i, p) in net.mlp.params_mut().iter_mut().enumerate() {
        if i % 2 == 1 {
            *p = random_tensor(r, p.shape(), -0.5, 0.5);
        }
    }
    let (nx, ny) = (r.random_range(3..9), r.random_range(3..9));
    let x = random_tensor(r, &[nx, m], -2.0, 2.0);
    let y = random_tensor(r, &[ny, m], -1.0, 3.0);
    let alpha = r.random_range(0.1..2.0);
    let e = objective(o, &net, &x, &y, alpha);
    let theta = flatten(net.mlp.params());
    let d: Vec<f64> = (0..theta.len()).map(|_| r.random_range(-1.0..1.0)).collect();
    let analytic: f64 = flatten(&e.grads).iter().zip(&d).map(|(g, di)| g * di).sum();
    let h = 1e-6;
    let at = |s: f64| {
        let p: Vec<f64> = theta.iter().zip(&d).map(|(t, di)| t + s * di).collect();
        objective(o, &with_params(&net, &p), &x, &y, alpha).loss
    };
    let numeric = (at(h) - at(-h)) / (2.0 * h);
    rel_err(&[analytic], &[numeric])
}

/// Gradient penalty of a smooth two-layer network built directly on the
/// tape, `mean_i |grad_x R(x_i)|^2` with `R(x) = softplus(x W1 + b1) w2`,
/// checked against central differences in every parameter.
pub fn check_smooth_penalty(r: &mut dyn rand::RngCore) -> f64 {
    let (n, m, h) = (r.random_range(2..6), r.random_range(1..4), r.random_range(2..6));
    let x = random_tensor(r, &[n, m], -2.0, 2.0);
    let params = vec![
        random_tensor(r, &[m, h], -1.0, 1.0),
        random_tensor(r, &[h], -1.0, 1.0),
        random_tensor(r, &[h, 1], -1.0, 1.0),
    ];
    let eval = |ps: &[Tensor]| -> (f64, Vec<Tensor>) {
        let mut t = Tape::new();
        let vars = bind(&mut t, ps);
        let xi = t.input_with(x.clone()).unwrap();
        let a = t.matmul(xi, vars[0]).unwrap();
        let a = t.add_bias(a, vars[1]).unwrap();
        let a = t.softplus(a).unwrap();
        let out = t.matmul(a, vars[2]).unwrap();
        let s = t.sum(out).unwrap();
        let g = ept_core::autodiff::input_gradient(&mut t, s, xi).unwrap();
        let sq = t.square(g).unwrap();
        let rows = t.sum_cols(sq).unwrap();
        let pen = t.mean(rows).unwrap();
        let val = t.value(pen).unwrap().item();
        let grads = ept_core::autodiff::second_order_param_grad(&t, pen, &vars).unwrap();
        (val, grads)
    };
    let (_, g) = eval(&params);
    let theta = flatten(&params);
    let fd = fd_grad(&mut |p| eval(&unflatten(&params, p)).0, &theta, FD_STEP);
    rel_err(&flatten(&g), &fd)
}

/// A scalar field from closures, for oracle ratios.
pub struct FnField<V, G> {
    pub dim: usize,
    pub value: V,
    pub grad: G,
}

impl<V, G> ScalarField for FnField<V, G>
where
    V: Fn(&[f64]) -> f64 + Sync,
    G: Fn(&[f64]) -> Vec<f64> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn value_and_grad(&self, xs: &Tensor) -> Result<(Tensor, Tensor)> {
        let v: Vec<f64> = xs.rows().map(|r| (self.value)(r)).collect();
        let g: Vec<f64> = xs.rows().flat_map(|r| (self.grad)(r)).collect();
        Ok((Tensor::vector(v), Tensor::new(xs.shape().to_vec(), g)?))
    }
}

/// Squared W2 by enumerating every matching (small `n` only).
pub fn w2_brute_force(x: &Tensor, y: &Tensor) -> f64 {
    fn permute(k: usize, perm: &mut Vec<usize>, best: &mut f64, cost: &dyn Fn(&[usize]) -> f64) {
        if k == perm.len() {
            *best = best.min(cost(perm));
            return;
        }
        for i in k..perm.len() {
            perm.swap(k, i);
            permute(k + 1, perm, best, cost);
            perm.swap(k, i);
        }
    }
    let n = x.nrows();
    let cost = |p: &[usize]| -> f64 {
        (0..n)
            .map(|i| x.row(i).iter().zip(y.row(p[i])).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .sum::<f64>()
            / n as f64
    };
    let mut best = f64::INFINITY;
    permute(0, &mut (0..n).collect(), &mut best, &cost);
    best.sqrt()
}
