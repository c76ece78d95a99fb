//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records operations in construction order, which is also a valid
//! topological order. Node values are computed eagerly whenever all parents
//! have values, and [`Tape::forward`] replays the whole tape with fresh leaf
//! bindings.
//!
//! Two backward passes are provided:
//!
//! * [`Tape::backward`] propagates numeric adjoints and returns gradients for
//!   every non-constant leaf.
//! * [`Tape::grad`] builds the gradient as new nodes on the same tape, so the
//!   result is itself differentiable. This is what makes penalties such as
//!   `mean ||grad_x R(x)||^2` differentiable with respect to the parameters of
//!   `R`.
//!
//! ReLU uses the subgradient 0 at exactly 0, and its derivative mask has zero
//! derivative, so second-order quantities ignore the kink set.

use crate::error::{shape_err, EptError, Result};
use crate::tensor::{matmul, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafKind {
    /// Placeholder bound at [`Tape::forward`] time.
    Input,
    /// Trainable parameter.
    Param,
    /// Fixed value; never receives an adjoint.
    Constant,
}

#[derive(Clone, Debug, PartialEq)]
enum Op {
    Leaf(LeafKind),
    MatMul { ta: bool, tb: bool },
    /// `x (n x m) + b (m)` broadcast over rows.
    AddBias,
    /// `n x m -> m`
    SumRows,
    /// `m -> n x m`
    BroadcastRows(usize),
    /// `n x m -> n`
    SumCols,
    /// `n -> n x m`
    BroadcastCols(usize),
    /// any -> scalar
    Sum,
    /// scalar -> shape
    Fill(Vec<usize>),
    Reshape(Vec<usize>),
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    AddScalar(f64),
    Square,
    Relu,
    /// Derivative mask of a ReLU; zero derivative by convention.
    ReluMask,
    /// User-facing hard threshold; differentiating through it is an error.
    Threshold,
    Exp,
    Ln,
    Softplus,
    Sigmoid,
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    parents: Vec<usize>,
    shape: Vec<usize>,
    value: Option<Tensor>,
}

/// Adjoints of the leaves reached by [`Tape::backward`].
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros of `shape` when `v` was not reached.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

// ---------------------------------------------------------------------------
// tensor kernels

fn sum_rows(x: &Tensor) -> Tensor {
    let m = x.ncols();
    let mut out = vec![0.0; m];
    for r in x.rows() {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    Tensor::vector(out)
}

fn broadcast_rows(x: &Tensor, n: usize) -> Tensor {
    let m = x.len();
    let mut data = Vec::with_capacity(n * m);
    for _ in 0..n {
        data.extend_from_slice(x.data());
    }
    Tensor::new(vec![n, m], data).expect("broadcast_rows shape")
}

fn sum_cols(x: &Tensor) -> Tensor {
    Tensor::vector(x.rows().map(|r| r.iter().sum()).collect())
}

fn broadcast_cols(x: &Tensor, m: usize) -> Tensor {
    let n = x.len();
    let mut data = Vec::with_capacity(n * m);
    for &v in x.data() {
        data.extend(std::iter::repeat_n(v, m));
    }
    Tensor::new(vec![n, m], data).expect("broadcast_cols shape")
}

fn add_bias(x: &Tensor, b: &Tensor) -> Tensor {
    let mut out = x.clone();
    let m = b.len();
    for r in out.data_mut().chunks_mut(m) {
        for (o, v) in r.iter_mut().zip(b.data()) {
            *o += v;
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

impl Op {
    fn eval(&self, p: &[&Tensor], shape: &[usize]) -> Result<Tensor> {
        let out = match self {
            Op::Leaf(_) => unreachable!("leaves are bound, not evaluated"),
            Op::MatMul { ta, tb } => matmul(p[0], p[1], *ta, *tb)?,
            Op::AddBias => add_bias(p[0], p[1]),
            Op::SumRows => sum_rows(p[0]),
            Op::BroadcastRows(n) => broadcast_rows(p[0], *n),
            Op::SumCols => sum_cols(p[0]),
            Op::BroadcastCols(m) => broadcast_cols(p[0], *m),
            Op::Sum => Tensor::scalar(p[0].sum()),
            Op::Fill(s) => Tensor::full(s, p[0].item()),
            Op::Reshape(s) => p[0].clone().reshape(s.clone())?,
            Op::Add => p[0].zip_map(p[1], |a, b| a + b),
            Op::Sub => p[0].zip_map(p[1], |a, b| a - b),
            Op::Mul => p[0].zip_map(p[1], |a, b| a * b),
            Op::Div => p[0].zip_map(p[1], |a, b| a / b),
            Op::Scale(c) => p[0].map(|a| a * c),
            Op::AddScalar(c) => p[0].map(|a| a + c),
            Op::Square => p[0].map(|a| a * a),
            Op::Relu => p[0].map(|a| if a > 0.0 { a } else { 0.0 }),
            Op::ReluMask | Op::Threshold => p[0].map(|a| if a > 0.0 { 1.0 } else { 0.0 }),
            Op::Exp => p[0].map(f64::exp),
            Op::Ln => p[0].map(f64::ln),
            Op::Softplus => p[0].map(softplus),
            Op::Sigmoid => p[0].map(sigmoid),
        };
        debug_assert_eq!(out.shape(), shape);
        Ok(out)
    }

    fn has_zero_derivative(&self) -> bool {
        matches!(self, Op::ReluMask | Op::Threshold)
    }
}

fn same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(shape_err(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Current value of a node, if it has been computed.
    pub fn value(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].value.as_ref()
    }

    fn leaf(&mut self, kind: LeafKind, shape: Vec<usize>, value: Option<Tensor>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf(kind),
            parents: Vec::new(),
            shape,
            value,
        });
        Var(self.nodes.len() - 1)
    }

    /// Placeholder leaf; its value is supplied by [`Tape::forward`].
    pub fn input(&mut self, shape: &[usize]) -> Var {
        self.leaf(LeafKind::Input, shape.to_vec(), None)
    }

    /// Input leaf with an initial value.
    pub fn input_with(&mut self, value: Tensor) -> Result<Var> {
        value.ensure_finite("input leaf")?;
        Ok(self.leaf(LeafKind::Input, value.shape().to_vec(), Some(value)))
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        value.ensure_finite("parameter leaf")?;
        Ok(self.leaf(LeafKind::Param, value.shape().to_vec(), Some(value)))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        value.ensure_finite("constant leaf")?;
        Ok(self.leaf(LeafKind::Constant, value.shape().to_vec(), Some(value)))
    }

    pub fn scalar_constant(&mut self, value: f64) -> Result<Var> {
        self.constant(Tensor::scalar(value))
    }

    fn push(&mut self, op: Op, parents: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let value = if parents.iter().all(|&p| self.nodes[p].value.is_some()) {
            let pv: Vec<&Tensor> = parents
                .iter()
                .map(|&p| self.nodes[p].value.as_ref().unwrap())
                .collect();
            Some(op.eval(&pv, &shape)?)
        } else {
            None
        };
        self.nodes.push(Node {
            op,
            parents,
            shape,
            value,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // -- operations ---------------------------------------------------------

    /// `op(a) * op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err(format!("matmul needs matrices: {sa:?}, {sb:?}")));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(shape_err(format!("matmul inner dims {k} vs {k2}")));
        }
        self.push(Op::MatMul { ta, tb }, vec![a.0, b.0], vec![m, n])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(shape_err(format!("add_bias: {sx:?} + {sb:?}")));
        }
        self.push(Op::AddBias, vec![x.0, b.0], sx)
    }

    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(shape_err(format!("sum_rows needs a matrix, got {s:?}")));
        }
        self.push(Op::SumRows, vec![x.0], vec![s[1]])
    }

    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 1 {
            return Err(shape_err(format!("broadcast_rows needs a vector, got {s:?}")));
        }
        self.push(Op::BroadcastRows(n), vec![x.0], vec![n, s[0]])
    }

    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(shape_err(format!("sum_cols needs a matrix, got {s:?}")));
        }
        self.push(Op::SumCols, vec![x.0], vec![s[0]])
    }

    pub fn broadcast_cols(&mut self, x: Var, m: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 1 {
            return Err(shape_err(format!("broadcast_cols needs a vector, got {s:?}")));
        }
        self.push(Op::BroadcastCols(m), vec![x.0], vec![s[0], m])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sum, vec![x.0], Vec::new())
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n: usize = self.shape(x).iter().product();
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn fill(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if !self.shape(x).is_empty() {
            return Err(shape_err("fill needs a scalar"));
        }
        self.push(Op::Fill(shape.to_vec()), vec![x.0], shape.to_vec())
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = self.shape(x).iter().product();
        if n != shape.iter().product::<usize>() {
            return Err(shape_err(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(x)
            )));
        }
        self.push(Op::Reshape(shape.to_vec()), vec![x.0], shape.to_vec())
    }

    fn binary(&mut self, op: Op, a: Var, b: Var, what: &str) -> Result<Var> {
        let s = self.shape(a).to_vec();
        same_shape(&s, self.shape(b), what)?;
        self.push(op, vec![a.0, b.0], s)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Mul, a, b, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Div, a, b, "div")
    }

    fn unary(&mut self, op: Op, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        self.push(op, vec![x.0], s)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(Op::Scale(c), x)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(Op::AddScalar(c), x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Square, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Relu, x)
    }

    /// Hard threshold `1[x > 0]`. Its derivative is undefined for the purpose
    /// of [`second_order_param_grad`].
    pub fn threshold(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Threshold, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Exp, x)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Ln, x)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Softplus, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Sigmoid, x)
    }

    // -- evaluation ---------------------------------------------------------

    /// Rebind leaves and recompute every node. Returns the value of `root`.
    pub fn forward(&mut self, root: Var, bindings: &[(Var, &Tensor)]) -> Result<Tensor> {
        for &(v, t) in bindings {
            let node = &self.nodes[v.0];
            match node.op {
                Op::Leaf(LeafKind::Input) | Op::Leaf(LeafKind::Param) => {}
                _ => {
                    return Err(EptError::InvalidArgument(format!(
                        "node {} is not a bindable leaf",
                        v.0
                    )))
                }
            }
            same_shape(&node.shape, t.shape(), "binding")?;
            t.ensure_finite("forward binding")?;
            self.nodes[v.0].value = Some(t.clone());
        }
        for i in 0..self.nodes.len() {
            if let Op::Leaf(kind) = self.nodes[i].op {
                if self.nodes[i].value.is_none() {
                    debug_assert_eq!(kind, LeafKind::Input);
                    return Err(EptError::MissingBinding(i));
                }
                continue;
            }
            let value = {
                let node = &self.nodes[i];
                let pv: Vec<&Tensor> = node
                    .parents
                    .iter()
                    .map(|&p| self.nodes[p].value.as_ref().unwrap())
                    .collect();
                node.op.eval(&pv, &node.shape)?
            };
            self.nodes[i].value = Some(value);
        }
        Ok(self.nodes[root.0].value.clone().unwrap())
    }

    /// Nodes at or below `root` that depend on any of the `targets` leaves
    /// through ops with a non-zero derivative.
    fn dependency_mask(&self, root: Var, targets: impl Fn(usize, &Node) -> bool) -> Vec<bool> {
        let mut mask = vec![false; root.0 + 1];
        for i in 0..=root.0 {
            let node = &self.nodes[i];
            mask[i] = match node.op {
                Op::Leaf(_) => targets(i, node),
                ref op if op.has_zero_derivative() => false,
                _ => node.parents.iter().any(|&p| mask[p]),
            };
        }
        mask
    }

    /// Numeric reverse pass from `root` with the given seed. Adjoints of
    /// every input and parameter leaf reached are returned.
    pub fn backward(&self, root: Var, seed: &Tensor) -> Result<Gradients> {
        for i in 0..=root.0 {
            if self.nodes[i].value.is_none() {
                return Err(EptError::BackwardBeforeForward(i));
            }
        }
        same_shape(&self.nodes[root.0].shape, seed.shape(), "backward seed")?;
        let mask = self.dependency_mask(root, |_, n| {
            !matches!(n.op, Op::Leaf(LeafKind::Constant))
        });
        let mut adj: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        adj[root.0] = Some(seed.clone());
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf(_)) || !mask[i] {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            let contribs = self.vjp_numeric(i, &g)?;
            for (p, c) in node.parents.iter().zip(contribs) {
                let Some(c) = c else { continue };
                if !mask[*p] {
                    continue;
                }
                match &mut adj[*p] {
                    Some(a) => a.add_assign(&c),
                    slot => *slot = Some(c),
                }
            }
        }
        Ok(Gradients { grads: adj })
    }

    fn val(&self, i: usize) -> &Tensor {
        self.nodes[i].value.as_ref().expect("value present")
    }

    fn vjp_numeric(&self, i: usize, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let node = &self.nodes[i];
        let p = &node.parents;
        let out = match &node.op {
            Op::Leaf(_) => Vec::new(),
            Op::MatMul { ta, tb } => {
                let (a, b) = (self.val(p[0]), self.val(p[1]));
                let da = if !ta {
                    matmul(g, b, false, !tb)?
                } else {
                    matmul(b, g, *tb, true)?
                };
                let db = if !tb {
                    matmul(a, g, !ta, false)?
                } else {
                    matmul(g, a, true, *ta)?
                };
                vec![Some(da), Some(db)]
            }
            Op::AddBias => vec![Some(g.clone()), Some(sum_rows(g))],
            Op::SumRows => vec![Some(broadcast_rows(g, self.nodes[p[0]].shape[0]))],
            Op::BroadcastRows(_) => vec![Some(sum_rows(g))],
            Op::SumCols => vec![Some(broadcast_cols(g, self.nodes[p[0]].shape[1]))],
            Op::BroadcastCols(_) => vec![Some(sum_cols(g))],
            Op::Sum => vec![Some(Tensor::full(&self.nodes[p[0]].shape, g.item()))],
            Op::Fill(_) => vec![Some(Tensor::scalar(g.sum()))],
            Op::Reshape(_) => vec![Some(g.clone().reshape(self.nodes[p[0]].shape.clone())?)],
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::Sub => vec![Some(g.clone()), Some(g.map(|v| -v))],
            Op::Mul => {
                let (a, b) = (self.val(p[0]), self.val(p[1]));
                vec![
                    Some(g.zip_map(b, |g, b| g * b)),
                    Some(g.zip_map(a, |g, a| g * a)),
                ]
            }
            Op::Div => {
                let b = self.val(p[1]);
                let y = self.val(i);
                let da = g.zip_map(b, |g, b| g / b);
                let db = da.zip_map(y, |q, y| -q * y);
                vec![Some(da), Some(db)]
            }
            Op::Scale(c) => vec![Some(g.map(|v| v * c))],
            Op::AddScalar(_) => vec![Some(g.clone())],
            Op::Square => vec![Some(g.zip_map(self.val(p[0]), |g, x| 2.0 * x * g))],
            Op::Relu => vec![Some(
                g.zip_map(self.val(p[0]), |g, x| if x > 0.0 { g } else { 0.0 }),
            )],
            Op::ReluMask | Op::Threshold => vec![None],
            Op::Exp => vec![Some(g.zip_map(self.val(i), |g, y| g * y))],
            Op::Ln => vec![Some(g.zip_map(self.val(p[0]), |g, x| g / x))],
            Op::Softplus => vec![Some(g.zip_map(self.val(p[0]), |g, x| g * sigmoid(x)))],
            Op::Sigmoid => vec![Some(g.zip_map(self.val(i), |g, y| g * y * (1.0 - y)))],
        };
        Ok(out)
    }

    /// Symbolic gradient of a scalar `root` with respect to `wrt`, built as
    /// new nodes so the result can be differentiated again.
    pub fn grad(&mut self, root: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        if !self.shape(root).is_empty() {
            return Err(EptError::NonScalarRoot(self.shape(root).to_vec()));
        }
        let seed = self.scalar_constant(1.0)?;
        self.grad_with_seed(root, seed, wrt)
    }

    /// Symbolic vector-Jacobian product `seed^T d root / d wrt`.
    pub fn grad_with_seed(&mut self, root: Var, seed: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        same_shape(self.shape(root), self.shape(seed), "grad seed")?;
        let targets: Vec<usize> = wrt.iter().map(|v| v.0).collect();
        let mask = self.dependency_mask(root, |i, _| targets.contains(&i));
        let mut adj: Vec<Option<Var>> = vec![None; root.0 + 1];
        adj[root.0] = Some(seed);
        let mut results: Vec<Option<Var>> = vec![None; root.0 + 1];
        for i in (0..=root.0).rev() {
            if !mask[i] {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf(_)) {
                results[i] = Some(g);
                continue;
            }
            let parents = self.nodes[i].parents.clone();
            let contribs = self.vjp_symbolic(i, g)?;
            for (p, c) in parents.into_iter().zip(contribs) {
                let Some(c) = c else { continue };
                if !mask[p] {
                    continue;
                }
                adj[p] = Some(match adj[p] {
                    Some(a) => self.add(a, c)?,
                    None => c,
                });
            }
        }
        wrt.iter()
            .map(|&v| match results.get(v.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let shape = self.shape(v).to_vec();
                    self.constant(Tensor::zeros(&shape))
                }
            })
            .collect()
    }

    fn vjp_symbolic(&mut self, i: usize, g: Var) -> Result<Vec<Option<Var>>> {
        let node = self.nodes[i].clone_header();
        let p: Vec<Var> = node.parents.iter().map(|&j| Var(j)).collect();
        let y = Var(i);
        let out = match node.op {
            Op::Leaf(_) => Vec::new(),
            Op::MatMul { ta, tb } => {
                let (a, b) = (p[0], p[1]);
                let da = if !ta {
                    self.matmul_t(g, b, false, !tb)?
                } else {
                    self.matmul_t(b, g, tb, true)?
                };
                let db = if !tb {
                    self.matmul_t(a, g, !ta, false)?
                } else {
                    self.matmul_t(g, a, true, ta)?
                };
                vec![Some(da), Some(db)]
            }
            Op::AddBias => vec![Some(g), Some(self.sum_rows(g)?)],
            Op::SumRows => {
                let n = self.nodes[p[0].0].shape[0];
                vec![Some(self.broadcast_rows(g, n)?)]
            }
            Op::BroadcastRows(_) => vec![Some(self.sum_rows(g)?)],
            Op::SumCols => {
                let m = self.nodes[p[0].0].shape[1];
                vec![Some(self.broadcast_cols(g, m)?)]
            }
            Op::BroadcastCols(_) => vec![Some(self.sum_cols(g)?)],
            Op::Sum => {
                let s = self.nodes[p[0].0].shape.clone();
                vec![Some(self.fill(g, &s)?)]
            }
            Op::Fill(_) => vec![Some(self.sum(g)?)],
            Op::Reshape(_) => {
                let s = self.nodes[p[0].0].shape.clone();
                vec![Some(self.reshape(g, &s)?)]
            }
            Op::Add => vec![Some(g), Some(g)],
            Op::Sub => vec![Some(g), Some(self.neg(g)?)],
            Op::Mul => vec![Some(self.mul(g, p[1])?), Some(self.mul(g, p[0])?)],
            Op::Div => {
                let da = self.div(g, p[1])?;
                let t = self.mul(da, y)?;
                vec![Some(da), Some(self.neg(t)?)]
            }
            Op::Scale(c) => vec![Some(self.scale(g, c)?)],
            Op::AddScalar(_) => vec![Some(g)],
            Op::Square => {
                let two_x = self.scale(p[0], 2.0)?;
                vec![Some(self.mul(g, two_x)?)]
            }
            Op::Relu => {
                let mask = self.unary(Op::ReluMask, p[0])?;
                vec![Some(self.mul(g, mask)?)]
            }
            Op::ReluMask | Op::Threshold => vec![None],
            Op::Exp => vec![Some(self.mul(g, y)?)],
            Op::Ln => vec![Some(self.div(g, p[0])?)],
            Op::Softplus => {
                let s = self.sigmoid(p[0])?;
                vec![Some(self.mul(g, s)?)]
            }
            Op::Sigmoid => {
                let one_minus = {
                    let t = self.neg(y)?;
                    self.add_scalar(t, 1.0)?
                };
                let d = self.mul(y, one_minus)?;
                vec![Some(self.mul(g, d)?)]
            }
        };
        Ok(out)
    }

    /// True when `root` depends on a user threshold through a path that also
    /// reaches one of `params`.
    fn threshold_on_param_path(&self, root: Var, params: &[Var]) -> bool {
        let targets: Vec<usize> = params.iter().map(|v| v.0).collect();
        // nodes that depend on params, ignoring zero-derivative cuts
        let mut dep = vec![false; root.0 + 1];
        for i in 0..=root.0 {
            let n = &self.nodes[i];
            dep[i] = match n.op {
                Op::Leaf(_) => targets.contains(&i),
                _ => n.parents.iter().any(|&p| dep[p]),
            };
        }
        // nodes on which root depends
        let mut reach = vec![false; root.0 + 1];
        reach[root.0] = true;
        for i in (0..=root.0).rev() {
            if reach[i] {
                for &p in &self.nodes[i].parents {
                    reach[p] = true;
                }
            }
        }
        (0..=root.0).any(|i| reach[i] && dep[i] && self.nodes[i].op == Op::Threshold)
    }
}

impl Node {
    fn clone_header(&self) -> Node {
        Node {
            op: self.op.clone(),
            parents: self.parents.clone(),
            shape: self.shape.clone(),
            value: None,
        }
    }
}

/// `grad_x root` for a scalar `root`, as a differentiable tape expression.
///
/// When `x` is a batch (`n x m`) and `root` is the sum of per-row outputs,
/// row `i` of the result is the gradient of the `i`-th output.
pub fn input_gradient(tape: &mut Tape, root: Var, x: Var) -> Result<Var> {
    Ok(tape.grad(root, &[x])?[0])
}

/// Exact parameter gradients of a penalty that may contain input gradients
/// built with [`input_gradient`].
pub fn second_order_param_grad(tape: &Tape, penalty: Var, params: &[Var]) -> Result<Vec<Tensor>> {
    if !tape.shape(penalty).is_empty() {
        return Err(EptError::NonScalarRoot(tape.shape(penalty).to_vec()));
    }
    if tape.threshold_on_param_path(penalty, params) {
        return Err(EptError::InvalidArgument(
            "expression is not twice differentiable: contains a hard threshold".into(),
        ));
    }
    let grads = tape.backward(penalty, &Tensor::scalar(1.0))?;
    Ok(params
        .iter()
        .map(|&p| grads.get_or_zeros(p, tape.shape(p)))
        .collect())
}
