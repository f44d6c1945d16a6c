//! Define-by-run tape for reverse-mode differentiation over [`Tensor`]s.
//!
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order; [`Tape::backward`] walks it once in reverse.

use super::kernels::{self, ConvGeometry, WarpPlan};
use super::Tensor;
use crate::error::{dim_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d(ConvGeometry),
    Conv2dMean(ConvGeometry),
    Warp(Box<WarpPlan>),
    Filter(Vec<f64>),
    AvgPool,
    Relu,
    Linear,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Sum,
    Dot,
}

#[derive(Debug)]
struct TapeNode {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<TapeNode>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the seeded output with respect to `v`; `None` if `v` does
    /// not influence the output or is a constant.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "{what} produced a non-finite value"
        )))
    }
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

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, vec![], value, true)
    }

    /// A non-differentiable input (weights, targets).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, vec![], value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(TapeNode {
            op,
            inputs,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, op: Op, inputs: &[Var], value: Tensor, what: &str) -> Result<Var> {
        check_finite(&value, what)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(op, inputs.iter().map(|v| v.0).collect(), value, rg))
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = ConvGeometry::new(
            self.value(input).dims(),
            self.value(kernel).dims(),
            stride,
            padding,
        )?;
        let out = kernels::conv2d(self.value(input), self.value(kernel), stride, padding)?;
        self.record(Op::Conv2d(geom), &[input, kernel], out, "conv2d")
    }

    /// Fused `global_avg_pool(conv2d(input, kernel))`.
    pub fn conv2d_mean(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = ConvGeometry::new(
            self.value(input).dims(),
            self.value(kernel).dims(),
            stride,
            padding,
        )?;
        let out = kernels::conv2d_mean(self.value(input), self.value(kernel), stride, padding)?;
        self.record(Op::Conv2dMean(geom), &[input, kernel], out, "conv2d_mean")
    }

    pub fn affine_warp(
        &mut self,
        input: Var,
        rotation_deg: f64,
        crop_scale: f64,
        out_h: usize,
        out_w: usize,
    ) -> Result<Var> {
        let d = self.value(input).dims().to_vec();
        if d.len() != 3 {
            return dim_err("affine_warp input must be [H, W, C]");
        }
        let plan = WarpPlan::new(d[0], d[1], rotation_deg, crop_scale, out_h, out_w)?;
        let out = plan.apply(self.value(input))?;
        self.record(Op::Warp(Box::new(plan)), &[input], out, "affine_warp")
    }

    pub fn gaussian_blur(&mut self, input: Var, sigma: f64) -> Result<Var> {
        let taps = kernels::gaussian_taps(sigma)?;
        let out = kernels::separable_filter(self.value(input), &taps)?;
        self.record(Op::Filter(taps), &[input], out, "gaussian_blur")
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let out = kernels::global_avg_pool(self.value(input))?;
        self.record(Op::AvgPool, &[input], out, "global_avg_pool")
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let out = kernels::relu(self.value(input));
        self.record(Op::Relu, &[input], out, "relu")
    }

    pub fn linear_map(&mut self, input: Var, matrix: Var) -> Result<Var> {
        let out = kernels::linear_map(self.value(input), self.value(matrix))?;
        self.record(Op::Linear, &[input, matrix], out, "linear_map")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b))?;
        let mut out = self.value(a).clone();
        out.add_scaled(1.0, self.value(b));
        self.record(Op::Add, &[a, b], out, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b))?;
        let mut out = self.value(a).clone();
        out.add_scaled(-1.0, self.value(b));
        self.record(Op::Sub, &[a, b], out, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.value(a).dims().to_vec(), data)?;
        self.record(Op::Mul, &[a, b], out, "mul")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * factor);
        self.record(Op::Scale(factor), &[a], out, "scale")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).data().iter().sum());
        self.record(Op::Sum, &[a], out, "sum")
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b))?;
        let out = Tensor::scalar(self.value(a).dot(self.value(b)));
        self.record(Op::Dot, &[a, b], out, "dot")
    }

    /// Propagates `seed` (the cotangent of `output`) back through the tape.
    pub fn backward(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        self.value(output).same_shape(&seed)?;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let contributions = self.node_vjp(node, &g)?;
            grads[idx] = Some(g);
            for (input, contrib) in node.inputs.iter().zip(contributions) {
                let Some(c) = contrib else { continue };
                match &mut grads[*input] {
                    Some(acc) => acc.add_scaled(1.0, &c),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn node_vjp(&self, node: &TapeNode, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let input = |i: usize| &self.nodes[node.inputs[i]];
        let wants = |i: usize| input(i).requires_grad;
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d(geom) => vec![
                wants(0)
                    .then(|| kernels::conv2d_vjp_input(g, &input(1).value, geom))
                    .transpose()?,
                wants(1)
                    .then(|| kernels::conv2d_vjp_kernel(g, &input(0).value, geom))
                    .transpose()?,
            ],
            Op::Conv2dMean(geom) => vec![
                wants(0)
                    .then(|| kernels::conv2d_mean_vjp_input(g, &input(1).value, geom))
                    .transpose()?,
                wants(1)
                    .then(|| kernels::conv2d_mean_vjp_kernel(g, &input(0).value, geom))
                    .transpose()?,
            ],
            Op::Warp(plan) => vec![Some(plan.vjp(g)?)],
            Op::Filter(taps) => vec![Some(kernels::separable_filter_vjp(g, taps)?)],
            Op::AvgPool => vec![Some(kernels::global_avg_pool_vjp(
                g,
                input(0).value.dims(),
            )?)],
            Op::Relu => vec![Some(kernels::relu_vjp(g, &input(0).value))],
            Op::Linear => vec![
                wants(0)
                    .then(|| kernels::linear_map_vjp_input(g, &input(1).value))
                    .transpose()?,
                wants(1)
                    .then(|| kernels::linear_map_vjp_matrix(g, &input(0).value))
                    .transpose()?,
            ],
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::Sub => vec![Some(g.clone()), Some(g.map(|v| -v))],
            Op::Mul => {
                let (a, b) = (&input(0).value, &input(1).value);
                let ga = zip_map(g, b, |x, y| x * y);
                let gb = zip_map(g, a, |x, y| x * y);
                vec![Some(ga), Some(gb)]
            }
            Op::Scale(f) => vec![Some(g.map(|v| v * f))],
            Op::Sum => {
                let s = g.data()[0];
                vec![Some(Tensor::filled(input(0).value.dims(), s))]
            }
            Op::Dot => {
                let s = g.data()[0];
                vec![
                    Some(input(1).value.map(|v| v * s)),
                    Some(input(0).value.map(|v| v * s)),
                ]
            }
        };
        Ok(out)
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.dims().to_vec(), data).expect("shapes checked at record time")
}
