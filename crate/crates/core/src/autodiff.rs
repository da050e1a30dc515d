//! Tape-based reverse-mode differentiation over [`RealMatrix`] values.
//!
//! Nodes are appended in evaluation order, so creation order is a valid
//! topological order and [`Tape::backward`] is a single reverse sweep.
//! Primitive algebra is built in; larger fused kernels (attention, the
//! fast-weight recurrence, cross-entropy) implement [`TapeOp`] next to their
//! forward code and are recorded with [`Tape::push_op`].

use std::collections::BTreeMap;
use std::ops::Range;

use crate::numerics::{self, Activation, NumericsError, RealMatrix};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("backward requires a 1x1 loss, got {0}x{1}")]
    NonScalarLoss(usize, usize),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("{0}")]
    Op(String),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a fused operation.
///
/// `needs[i]` tells whether input `i` participates in differentiation; rules
/// may return `None` for inputs that do not need a gradient.
pub trait TapeOp {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        out_grad: &RealMatrix,
        inputs: &[&RealMatrix],
        output: &RealMatrix,
        needs: &[bool],
    ) -> Vec<Option<RealMatrix>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    MatMulAt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Act(Var, Activation),
    Transpose(Var),
    SumAll(Var),
    SliceRows(Var, Range<usize>),
    ConcatRows(Vec<Var>),
    Custom(Vec<Var>, Box<dyn TapeOp>),
}

struct Node {
    value: RealMatrix,
    op: Op,
    requires_grad: bool,
}

/// Recording of a computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
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

    /// Registers a named trainable leaf.
    pub fn param(&mut self, name: impl Into<String>, value: RealMatrix) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push((name.into(), v));
        v
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: RealMatrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn value(&self, v: Var) -> &RealMatrix {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: RealMatrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = numerics::matmul(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = numerics::matmul_bt(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMulBt(a, b), rg))
    }

    /// `aᵀ · b`.
    pub fn matmul_at(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = numerics::matmul_at(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMulAt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.activate(a, Activation::Silu)
    }

    pub fn activate(&mut self, a: Var, act: Activation) -> Var {
        let value = numerics::activate(self.value(a), act);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Act(a, act), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Transpose(a), rg)
    }

    /// Sum of all entries as a 1x1 node.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = RealMatrix::scalar(self.value(a).sum());
        let rg = self.any_grad(&[a]);
        self.push(value, Op::SumAll(a), rg)
    }

    pub fn slice_rows(&mut self, a: Var, range: Range<usize>) -> Var {
        let value = self.value(a).slice_rows(range.clone());
        let rg = self.any_grad(&[a]);
        self.push(value, Op::SliceRows(a, range), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<RealMatrix> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let value = RealMatrix::vstack(&values)?;
        let rg = self.any_grad(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Records a fused operation whose forward value was computed by the caller.
    pub fn push_op(&mut self, inputs: &[Var], value: RealMatrix, op: Box<dyn TapeOp>) -> Var {
        let rg = self.any_grad(inputs);
        self.push(value, Op::Custom(inputs.to_vec(), op), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let (r, c) = self.value(loss).shape();
        if (r, c) != (1, 1) {
            return Err(AutodiffError::NonScalarLoss(r, c));
        }
        let mut grads: Vec<Option<RealMatrix>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(RealMatrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let params = self
            .params
            .iter()
            .map(|(name, v)| {
                let g = grads
                    .get(v.0)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| {
                        let (r, c) = self.value(*v).shape();
                        RealMatrix::zeros(r, c)
                    });
                (name.clone(), g)
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, node: &Node, g: &RealMatrix, grads: &mut [Option<RealMatrix>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, numerics::matmul_bt(g, val(*b))?)?;
                }
                if wants(*b) {
                    accumulate(grads, *b, numerics::matmul_at(val(*a), g)?)?;
                }
            }
            Op::MatMulBt(a, b) => {
                // out = a bᵀ: da = g b, db = gᵀ a
                if wants(*a) {
                    accumulate(grads, *a, numerics::matmul(g, val(*b))?)?;
                }
                if wants(*b) {
                    accumulate(grads, *b, numerics::matmul_at(g, val(*a))?)?;
                }
            }
            Op::MatMulAt(a, b) => {
                // out = aᵀ b: da = b gᵀ, db = a g
                if wants(*a) {
                    accumulate(grads, *a, numerics::matmul_bt(val(*b), g)?)?;
                }
                if wants(*b) {
                    accumulate(grads, *b, numerics::matmul(val(*a), g)?)?;
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.clone())?;
                }
                if wants(*b) {
                    accumulate(grads, *b, g.clone())?;
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.clone())?;
                }
                if wants(*b) {
                    accumulate(grads, *b, g.scale(-1.0))?;
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.hadamard(val(*b))?)?;
                }
                if wants(*b) {
                    accumulate(grads, *b, g.hadamard(val(*a))?)?;
                }
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.scale(*s))?,
            Op::Act(a, act) => {
                let x = val(*a);
                let mut d = g.clone();
                for (dv, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                    *dv *= act.derivative(xv);
                }
                accumulate(grads, *a, d)?;
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose())?,
            Op::SumAll(a) => {
                let (r, c) = val(*a).shape();
                accumulate(grads, *a, RealMatrix::filled(r, c, g.data()[0]))?;
            }
            Op::SliceRows(a, range) => {
                let (r, c) = val(*a).shape();
                let mut d = RealMatrix::zeros(r, c);
                d.data_mut()[range.start * c..range.end * c].copy_from_slice(g.data());
                accumulate(grads, *a, d)?;
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = val(*p).rows();
                    if wants(*p) {
                        accumulate(grads, *p, g.slice_rows(start..start + rows))?;
                    }
                    start += rows;
                }
            }
            Op::Custom(inputs, op) => {
                let values: Vec<&RealMatrix> = inputs.iter().map(|&v| val(v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&v| wants(v)).collect();
                let out = op.backward(g, &values, &node.value, &needs);
                if out.len() != inputs.len() {
                    return Err(AutodiffError::Op(format!(
                        "{} returned {} gradients for {} inputs",
                        op.name(),
                        out.len(),
                        inputs.len()
                    )));
                }
                for ((&v, d), need) in inputs.iter().zip(out).zip(needs) {
                    if let (Some(d), true) = (d, need) {
                        if d.shape() != val(v).shape() {
                            return Err(AutodiffError::Op(format!(
                                "{} produced gradient {:?} for input {:?}",
                                op.name(),
                                d.shape(),
                                val(v).shape()
                            )));
                        }
                        accumulate(grads, v, d)?;
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<RealMatrix>], v: Var, d: RealMatrix) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&d)?,
        slot @ None => *slot = Some(d),
    }
    Ok(())
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<RealMatrix>>,
    params: Vec<(String, RealMatrix)>,
}

impl Gradients {
    /// Gradient of any node, `None` if it is not on a path to the loss.
    pub fn get(&self, v: Var) -> Option<&RealMatrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a registered parameter; zero when off the loss path.
    pub fn param(&self, name: &str) -> Option<&RealMatrix> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, g)| g)
    }

    /// Parameter gradients in registration order.
    pub fn params(&self) -> &[(String, RealMatrix)] {
        &self.params
    }

    pub fn into_params(self) -> Vec<(String, RealMatrix)> {
        self.params
    }

    pub fn to_map(&self) -> BTreeMap<String, RealMatrix> {
        self.params.iter().cloned().collect()
    }
}

/// Settings for [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Absolute error that always passes. Coordinates whose gradient is
    /// below `abs_floor / tolerance` are judged on absolute error, since
    /// central differences cannot resolve them relatively.
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-5,
            abs_floor: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub analytic: RealMatrix,
    pub numeric: RealMatrix,
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
}

#[derive(Clone, Debug)]
pub struct GradientReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradientReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares reverse-mode gradients of `f` against central differences for
/// every coordinate of every parameter.
///
/// `f` receives a fresh tape and the parameter handles (in the order of
/// `params`) and returns the scalar loss node.
pub fn grad_check<F, E>(
    f: F,
    params: &[(String, RealMatrix)],
    config: &GradCheckConfig,
) -> std::result::Result<GradientReport, E>
where
    F: Fn(&mut Tape, &[Var]) -> std::result::Result<Var, E>,
    E: From<AutodiffError>,
{
    let eval = |values: &[(String, RealMatrix)]| -> std::result::Result<(Tape, Var), E> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|(n, v)| tape.param(n.clone(), v.clone()))
            .collect();
        let loss = f(&mut tape, &vars)?;
        Ok((tape, loss))
    };

    let (tape, loss) = eval(params)?;
    let grads = tape.backward(loss)?;
    drop(tape);

    let mut work: Vec<(String, RealMatrix)> = params.to_vec();
    let mut checks = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let analytic = grads.params()[p].1.clone();
        let (rows, cols) = params[p].1.shape();
        let mut numeric = RealMatrix::zeros(rows, cols);
        for i in 0..rows * cols {
            let orig = work[p].1.data()[i];
            work[p].1.data_mut()[i] = orig + config.step;
            let (t, l) = eval(&work)?;
            let plus = t.value(l).data()[0];
            work[p].1.data_mut()[i] = orig - config.step;
            let (t, l) = eval(&work)?;
            let minus = t.value(l).data()[0];
            work[p].1.data_mut()[i] = orig;
            numeric.data_mut()[i] = (plus - minus) / (2.0 * config.step);
        }
        let (max_rel_error, worst_index) = analytic
            .data()
            .iter()
            .zip(numeric.data())
            .map(|(&a, &n)| relative_error(a, n, config.abs_floor / config.tolerance))
            .enumerate()
            .fold((0.0f64, 0usize), |(m, mi), (i, e)| if e > m { (e, i) } else { (m, mi) });
        checks.push(ParamCheck {
            name: params[p].0.clone(),
            analytic,
            numeric,
            max_rel_error,
            worst_index,
        });
    }
    let max_rel_error = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(GradientReport {
        passed: max_rel_error < config.tolerance,
        tolerance: config.tolerance,
        max_rel_error,
        params: checks,
    })
}
