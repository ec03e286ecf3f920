//! Wengert tape over [`Tensor`] values.
//!
//! Every value used in a computation lives on the tape as a node. Nodes whose
//! inputs require gradients record the primitive that produced them;
//! [`Tape::backward`] replays those records in exact reverse order. A node
//! referenced by several primitives (a tied weight used as `W` and `Wᵀ`)
//! accumulates the sum of its path contributions.

use std::fmt;
use std::str::FromStr;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Batch-normalization statistics source.
#[derive(Clone, Debug, PartialEq)]
pub enum BatchNormMode {
    /// Normalize with the batch's own per-column mean and biased variance.
    Train { eps: f64 },
    /// Normalize with stored running statistics; a fixed affine map of the input.
    Eval {
        mean: Vec<f64>,
        var: Vec<f64>,
        eps: f64,
    },
}

/// The differentiable primitives.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// `a · b`
    Matmul,
    /// `a · wᵀ`, reading `w` through transposed strides.
    MatmulTransposed,
    /// `x + b` with `b` a `1 x n` row broadcast over rows.
    AddRowBias,
    /// `x - r` with `r` a `1 x n` row broadcast over rows.
    SubRow,
    Add,
    Sub,
    Mul,
    Div,
    Relu,
    Log,
    Exp,
    Abs,
    Square,
    Sqrt,
    SoftmaxRows,
    LogSoftmaxRows,
    MeanAll,
    SumAll,
    /// Per-column mean, `m x n -> 1 x n`.
    ColumnMean,
    /// Per-row sum, `m x n -> m x 1`.
    RowSum,
    Scale(f64),
    AddScalar(f64),
    /// Picks `x[i, cols[i]]`, `m x n -> m x 1`.
    PickColumns(Vec<usize>),
    /// Inputs: `x (m x n)`, `gamma (1 x n)`, `beta (1 x n)`.
    BatchNorm(BatchNormMode),
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Matmul => "matmul",
            Primitive::MatmulTransposed => "matmul_transposed",
            Primitive::AddRowBias => "add_row_bias",
            Primitive::SubRow => "sub_row",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::Relu => "relu",
            Primitive::Log => "log",
            Primitive::Exp => "exp",
            Primitive::Abs => "abs",
            Primitive::Square => "square",
            Primitive::Sqrt => "sqrt",
            Primitive::SoftmaxRows => "softmax_rows",
            Primitive::LogSoftmaxRows => "log_softmax_rows",
            Primitive::MeanAll => "mean_all",
            Primitive::SumAll => "sum_all",
            Primitive::ColumnMean => "column_mean",
            Primitive::RowSum => "row_sum",
            Primitive::Scale(_) => "scale",
            Primitive::AddScalar(_) => "add_scalar",
            Primitive::PickColumns(_) => "pick_columns",
            Primitive::BatchNorm(BatchNormMode::Train { .. }) => "batchnorm_train",
            Primitive::BatchNorm(BatchNormMode::Eval { .. }) => "batchnorm_eval",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            Primitive::Matmul
            | Primitive::MatmulTransposed
            | Primitive::AddRowBias
            | Primitive::SubRow
            | Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::Div => 2,
            Primitive::BatchNorm(_) => 3,
            _ => 1,
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parses the parameter-free primitives by name. Parametrized kinds
/// (`scale`, `add_scalar`, `pick_columns`, batchnorm) are constructed directly.
impl FromStr for Primitive {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "matmul" => Primitive::Matmul,
            "matmul_transposed" => Primitive::MatmulTransposed,
            "add_row_bias" => Primitive::AddRowBias,
            "sub_row" => Primitive::SubRow,
            "add" => Primitive::Add,
            "sub" => Primitive::Sub,
            "mul" => Primitive::Mul,
            "div" => Primitive::Div,
            "relu" => Primitive::Relu,
            "log" => Primitive::Log,
            "exp" => Primitive::Exp,
            "abs" => Primitive::Abs,
            "square" => Primitive::Square,
            "sqrt" => Primitive::Sqrt,
            "softmax_rows" => Primitive::SoftmaxRows,
            "log_softmax_rows" => Primitive::LogSoftmaxRows,
            "mean_all" => Primitive::MeanAll,
            "sum_all" => Primitive::SumAll,
            "column_mean" => Primitive::ColumnMean,
            "row_sum" => Primitive::RowSum,
            other => return Err(Error::UnknownPrimitive(other.to_string())),
        })
    }
}

/// Per-column statistics of a train-mode batchnorm application.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    pub rows: usize,
}

/// Scales the backward rule of one primitive kind. Exists to build
/// negative controls for gradient checking.
#[derive(Clone, Debug, PartialEq)]
pub struct BackwardFault {
    pub kind: &'static str,
    pub factor: f64,
}

#[derive(Debug)]
enum Saved {
    None,
    BatchNorm { xhat: Tensor, inv_std: Vec<f64> },
}

#[derive(Debug)]
struct Record {
    kind: Primitive,
    inputs: Vec<Var>,
    saved: Saved,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    record: Option<Record>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<BackwardFault>,
    /// Input signs of every relu and abs application, when tracked.
    kinks: Option<Vec<bool>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose backward rule for `fault.kind` is deliberately wrong.
    pub fn with_fault(fault: BackwardFault) -> Self {
        Self {
            fault: Some(fault),
            ..Self::default()
        }
    }

    /// Records which side of zero each relu and abs input falls on, so a
    /// finite-difference probe can tell when it stepped across a kink.
    pub fn track_kinks(mut self) -> Self {
        self.kinks = Some(Vec::new());
        self
    }

    pub fn kink_pattern(&self) -> Option<&[bool]> {
        self.kinks.as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push_leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite("leaf".into()));
        }
        self.nodes.push(Node {
            value,
            requires_grad,
            record: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Applies a primitive by kind. Typed helpers below are thin wrappers.
    pub fn apply(&mut self, kind: Primitive, inputs: &[Var]) -> Result<Var> {
        if inputs.len() != kind.arity() {
            return Err(Error::Arity {
                kind: kind.name(),
                expected: kind.arity(),
                got: inputs.len(),
            });
        }
        let (value, saved) = self.forward(&kind, inputs)?;
        if let (Some(kinks), Primitive::Relu | Primitive::Abs) = (&mut self.kinks, &kind) {
            kinks.extend(self.nodes[inputs[0].0].value.data().iter().map(|&x| x > 0.0));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite(kind.name().into()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let record = requires_grad.then(|| Record {
            kind,
            inputs: inputs.to_vec(),
            saved,
        });
        self.nodes.push(Node {
            value,
            requires_grad,
            record,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Matmul, &[a, b])
    }

    pub fn matmul_transposed(&mut self, a: Var, w: Var) -> Result<Var> {
        self.apply(Primitive::MatmulTransposed, &[a, w])
    }

    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::AddRowBias, &[x, b])
    }

    pub fn sub_row(&mut self, x: Var, r: Var) -> Result<Var> {
        self.apply(Primitive::SubRow, &[x, r])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Div, &[a, b])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[x])
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Abs, &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Square, &[x])
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sqrt, &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::SoftmaxRows, &[x])
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::LogSoftmaxRows, &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::MeanAll, &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::SumAll, &[x])
    }

    pub fn column_mean(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::ColumnMean, &[x])
    }

    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::RowSum, &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::Scale(c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::AddScalar(c), &[x])
    }

    pub fn pick_columns(&mut self, x: Var, cols: Vec<usize>) -> Result<Var> {
        self.apply(Primitive::PickColumns(cols), &[x])
    }

    /// Train-mode batchnorm; also returns the batch statistics so the caller
    /// can update running estimates.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let xv = self.value(x);
        let stats = BatchStats {
            mean: xv.column_means(),
            var: xv.column_variances(),
            rows: xv.rows(),
        };
        let out = self.apply(
            Primitive::BatchNorm(BatchNormMode::Train { eps }),
            &[x, gamma, beta],
        )?;
        Ok((out, stats))
    }

    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        var: Vec<f64>,
        eps: f64,
    ) -> Result<Var> {
        self.apply(
            Primitive::BatchNorm(BatchNormMode::Eval { mean, var, eps }),
            &[x, gamma, beta],
        )
    }

    fn forward(&self, kind: &Primitive, inputs: &[Var]) -> Result<(Tensor, Saved)> {
        let v = |i: usize| &self.nodes[inputs[i].0].value;
        let same_shape = |a: &Tensor, b: &Tensor| -> Result<()> {
            if a.shape() != b.shape() {
                return Err(shape_err(format!(
                    "{kind}: {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            Ok(())
        };
        let row_broadcast = |x: &Tensor, r: &Tensor| -> Result<()> {
            if r.rows() != 1 || r.cols() != x.cols() {
                return Err(shape_err(format!(
                    "{kind}: row {:?} does not broadcast over {:?}",
                    r.shape(),
                    x.shape()
                )));
            }
            Ok(())
        };
        let zip = |a: &Tensor, b: &Tensor, f: fn(f64, f64) -> f64| -> Tensor {
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.rows(), a.cols(), data).expect("same shape")
        };

        let out = match kind {
            Primitive::Matmul => {
                let (a, b) = (v(0), v(1));
                if a.cols() != b.rows() {
                    return Err(shape_err(format!(
                        "matmul {:?} by {:?}",
                        a.shape(),
                        b.shape()
                    )));
                }
                gemm(a, false, b, false)
            }
            Primitive::MatmulTransposed => {
                let (a, w) = (v(0), v(1));
                if a.cols() != w.cols() {
                    return Err(shape_err(format!(
                        "matmul_transposed {:?} by transpose of {:?}",
                        a.shape(),
                        w.shape()
                    )));
                }
                gemm(a, false, w, true)
            }
            Primitive::AddRowBias | Primitive::SubRow => {
                let (x, r) = (v(0), v(1));
                row_broadcast(x, r)?;
                let sign = if matches!(kind, Primitive::SubRow) { -1.0 } else { 1.0 };
                let mut out = x.clone();
                for row in out.data_mut().chunks_exact_mut(x.cols()) {
                    row.iter_mut().zip(r.data()).for_each(|(o, b)| *o += sign * b);
                }
                out
            }
            Primitive::Add => {
                same_shape(v(0), v(1))?;
                zip(v(0), v(1), |a, b| a + b)
            }
            Primitive::Sub => {
                same_shape(v(0), v(1))?;
                zip(v(0), v(1), |a, b| a - b)
            }
            Primitive::Mul => {
                same_shape(v(0), v(1))?;
                zip(v(0), v(1), |a, b| a * b)
            }
            Primitive::Div => {
                same_shape(v(0), v(1))?;
                zip(v(0), v(1), |a, b| a / b)
            }
            Primitive::Relu => v(0).map(|x| if x > 0.0 { x } else { 0.0 }),
            Primitive::Log => {
                if let Some(&bad) = v(0).data().iter().find(|&&x| x <= 0.0) {
                    return Err(Error::LogNonPositive(bad));
                }
                v(0).map(f64::ln)
            }
            Primitive::Exp => v(0).map(f64::exp),
            Primitive::Abs => v(0).map(f64::abs),
            Primitive::Square => v(0).map(|x| x * x),
            Primitive::Sqrt => {
                if let Some(&bad) = v(0).data().iter().find(|&&x| x < 0.0) {
                    return Err(Error::InvalidArgument(format!("sqrt of {bad}")));
                }
                v(0).map(f64::sqrt)
            }
            Primitive::SoftmaxRows => softmax_rows(v(0)),
            Primitive::LogSoftmaxRows => log_softmax_rows(v(0)),
            Primitive::MeanAll | Primitive::SumAll => {
                let x = v(0);
                if x.is_empty() {
                    return Err(shape_err(format!("{kind} of an empty tensor")));
                }
                let s: f64 = x.data().iter().sum();
                let s = if matches!(kind, Primitive::MeanAll) {
                    s / x.len() as f64
                } else {
                    s
                };
                Tensor::scalar(s)
            }
            Primitive::ColumnMean => {
                let x = v(0);
                if x.rows() == 0 {
                    return Err(shape_err("column_mean of zero rows"));
                }
                Tensor::row_vector(x.column_means())
            }
            Primitive::RowSum => {
                let x = v(0);
                let data = (0..x.rows()).map(|r| x.row(r).iter().sum()).collect();
                Tensor::new(x.rows(), 1, data)?
            }
            Primitive::Scale(c) => v(0).map(|x| x * c),
            Primitive::AddScalar(c) => v(0).map(|x| x + c),
            Primitive::PickColumns(cols) => {
                let x = v(0);
                if cols.len() != x.rows() {
                    return Err(shape_err(format!(
                        "pick_columns: {} indices for {} rows",
                        cols.len(),
                        x.rows()
                    )));
                }
                let mut data = Vec::with_capacity(cols.len());
                for (r, &c) in cols.iter().enumerate() {
                    if c >= x.cols() {
                        return Err(shape_err(format!(
                            "pick_columns: index {c} out of {} columns",
                            x.cols()
                        )));
                    }
                    data.push(x.get(r, c));
                }
                Tensor::new(x.rows(), 1, data)?
            }
            Primitive::BatchNorm(mode) => {
                let (x, gamma, beta) = (v(0), v(1), v(2));
                row_broadcast(x, gamma)?;
                row_broadcast(x, beta)?;
                if x.rows() == 0 {
                    return Err(shape_err("batchnorm of zero rows"));
                }
                let (mean, var, eps) = match mode {
                    BatchNormMode::Train { eps } => (x.column_means(), x.column_variances(), *eps),
                    BatchNormMode::Eval { mean, var, eps } => {
                        if mean.len() != x.cols() || var.len() != x.cols() {
                            return Err(shape_err("batchnorm running statistics width"));
                        }
                        (mean.clone(), var.clone(), *eps)
                    }
                };
                let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s + eps).sqrt()).collect();
                let cols = x.cols();
                let mut xhat = x.clone();
                for row in xhat.data_mut().chunks_exact_mut(cols) {
                    for ((h, m), s) in row.iter_mut().zip(&mean).zip(&inv_std) {
                        *h = (*h - m) * s;
                    }
                }
                let mut out = xhat.clone();
                for row in out.data_mut().chunks_exact_mut(cols) {
                    for ((o, g), b) in row.iter_mut().zip(gamma.data()).zip(beta.data()) {
                        *o = *o * g + b;
                    }
                }
                return Ok((out, Saved::BatchNorm { xhat, inv_std }));
            }
        };
        Ok((out, Saved::None))
    }

    /// Reverse-mode sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::NotScalar(lv.rows(), lv.cols()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Disconnected);
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let Some(record) = &self.nodes[id].record else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let input_grads = self.vjp(id, record, &g);
            grads[id] = Some(g);
            for (input, ig) in record.inputs.iter().zip(input_grads) {
                let Some(mut ig) = ig else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                if let Some(f) = &self.fault {
                    if f.kind == record.kind.name() {
                        ig.data_mut().iter_mut().for_each(|v| *v *= f.factor);
                    }
                }
                match &mut grads[input.0] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(ig.data())
                        .for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        for (id, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    let what = self.nodes[id]
                        .record
                        .as_ref()
                        .map_or("leaf", |r| r.kind.name());
                    return Err(Error::NonFinite(format!("gradient of {what} node {id}")));
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Vector-Jacobian product of one recorded node: one optional gradient
    /// per input, `None` where the input does not need one.
    fn vjp(&self, id: usize, record: &Record, g: &Tensor) -> Vec<Option<Tensor>> {
        let inp = |i: usize| &self.nodes[record.inputs[i].0].value;
        let want = |i: usize| self.nodes[record.inputs[i].0].requires_grad;
        let out = &self.nodes[id].value;
        let elementwise = |x: &Tensor, f: &dyn Fn(usize, f64) -> f64| -> Tensor {
            let data = x.data().iter().enumerate().map(|(i, &v)| f(i, v)).collect();
            Tensor::new(x.rows(), x.cols(), data).expect("same shape")
        };
        let column_sums = |t: &Tensor| -> Tensor {
            let mut s = vec![0.0; t.cols()];
            for r in 0..t.rows() {
                for (a, b) in s.iter_mut().zip(t.row(r)) {
                    *a += b;
                }
            }
            Tensor::row_vector(s)
        };
        let gd = g.data();

        match &record.kind {
            Primitive::Matmul => vec![
                want(0).then(|| gemm(g, false, inp(1), true)),
                want(1).then(|| gemm(inp(0), true, g, false)),
            ],
            Primitive::MatmulTransposed => vec![
                want(0).then(|| gemm(g, false, inp(1), false)),
                want(1).then(|| gemm(g, true, inp(0), false)),
            ],
            Primitive::AddRowBias => vec![want(0).then(|| g.clone()), want(1).then(|| column_sums(g))],
            Primitive::SubRow => vec![
                want(0).then(|| g.clone()),
                want(1).then(|| column_sums(g).map(|v| -v)),
            ],
            Primitive::Add => vec![want(0).then(|| g.clone()), want(1).then(|| g.clone())],
            Primitive::Sub => vec![want(0).then(|| g.clone()), want(1).then(|| g.map(|v| -v))],
            Primitive::Mul => {
                let (a, b) = (inp(0), inp(1));
                vec![
                    want(0).then(|| zip_map(g, b, |v, b| v * b)),
                    want(1).then(|| zip_map(g, a, |v, a| v * a)),
                ]
            }
            Primitive::Div => {
                let (a, b) = (inp(0), inp(1));
                vec![
                    want(0).then(|| zip_map(g, b, |v, b| v / b)),
                    want(1).then(|| {
                        elementwise(g, &|i, v| {
                            let bi = b.data()[i];
                            -v * a.data()[i] / (bi * bi)
                        })
                    }),
                ]
            }
            Primitive::Relu => {
                let x = inp(0);
                vec![Some(zip_map(g, x, |v, x| if x > 0.0 { v } else { 0.0 }))]
            }
            Primitive::Log => {
                let x = inp(0);
                vec![Some(zip_map(g, x, |v, x| v / x))]
            }
            Primitive::Exp => vec![Some(zip_map(g, out, |v, y| v * y))],
            Primitive::Abs => {
                let x = inp(0);
                vec![Some(zip_map(g, x, |v, x| {
                    if x > 0.0 {
                        v
                    } else if x < 0.0 {
                        -v
                    } else {
                        0.0
                    }
                }))]
            }
            Primitive::Square => {
                let x = inp(0);
                vec![Some(zip_map(g, x, |v, x| 2.0 * x * v))]
            }
            Primitive::Sqrt => vec![Some(zip_map(g, out, |v, y| if v == 0.0 { 0.0 } else { v / (2.0 * y) }))],
            Primitive::SoftmaxRows => {
                let mut gx = Tensor::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..out.cols() {
                        gx.set(r, c, y[c] * (gr[c] - dot));
                    }
                }
                vec![Some(gx)]
            }
            Primitive::LogSoftmaxRows => {
                let mut gx = Tensor::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let total: f64 = gr.iter().sum();
                    for c in 0..out.cols() {
                        gx.set(r, c, gr[c] - y[c].exp() * total);
                    }
                }
                vec![Some(gx)]
            }
            Primitive::MeanAll => {
                let x = inp(0);
                vec![Some(Tensor::full(x.rows(), x.cols(), gd[0] / x.len() as f64))]
            }
            Primitive::SumAll => {
                let x = inp(0);
                vec![Some(Tensor::full(x.rows(), x.cols(), gd[0]))]
            }
            Primitive::ColumnMean => {
                let x = inp(0);
                let n = x.rows() as f64;
                let row: Vec<f64> = gd.iter().map(|v| v / n).collect();
                vec![Some(Tensor::from_rows(&vec![row; x.rows()]).expect("equal rows"))]
            }
            Primitive::RowSum => {
                let x = inp(0);
                vec![Some(elementwise(x, &|i, _| gd[i / x.cols()]))]
            }
            Primitive::Scale(c) => vec![Some(g.map(|v| v * c))],
            Primitive::AddScalar(_) => vec![want(0).then(|| g.clone())],
            Primitive::PickColumns(cols) => {
                let x = inp(0);
                let mut gx = Tensor::zeros(x.rows(), x.cols());
                for (r, &c) in cols.iter().enumerate() {
                    gx.set(r, c, gd[r]);
                }
                vec![Some(gx)]
            }
            Primitive::BatchNorm(mode) => {
                let Saved::BatchNorm { xhat, inv_std } = &record.saved else {
                    unreachable!("batchnorm records its normalized input")
                };
                let gamma = inp(1);
                let (m, n) = xhat.shape();
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for (gr, hr) in g.data().chunks_exact(n).zip(xhat.data().chunks_exact(n)) {
                    for (((dg, db), &gv), &h) in dgamma.iter_mut().zip(&mut dbeta).zip(gr).zip(hr) {
                        *dg += gv * h;
                        *db += gv;
                    }
                }
                let gx = if !want(0) {
                    None
                } else {
                    let mut gx = Tensor::zeros(m, n);
                    match mode {
                        BatchNormMode::Eval { .. } => {
                            for r in 0..m {
                                for (c, s) in inv_std.iter().enumerate() {
                                    gx.set(r, c, g.get(r, c) * gamma.data()[c] * s);
                                }
                            }
                        }
                        BatchNormMode::Train { .. } => {
                            // d xhat = g * gamma; column sums of d xhat are
                            // gamma * dbeta and of d xhat * xhat are gamma * dgamma.
                            let mf = m as f64;
                            let rows = gx
                                .data_mut()
                                .chunks_exact_mut(n)
                                .zip(g.data().chunks_exact(n))
                                .zip(xhat.data().chunks_exact(n));
                            for ((out, gr), hr) in rows {
                                for c in 0..n {
                                    let gc = gamma.data()[c];
                                    out[c] = inv_std[c] / mf
                                        * (mf * gr[c] * gc - gc * dbeta[c] - hr[c] * gc * dgamma[c]);
                                }
                            }
                        }
                    }
                    Some(gx)
                };
                vec![
                    gx,
                    want(1).then(|| Tensor::row_vector(dgamma)),
                    want(2).then(|| Tensor::row_vector(dbeta)),
                ]
            }
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.rows(), a.cols(), data).expect("same shape")
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let cols = x.cols();
    for row in out.data_mut().chunks_exact_mut(cols.max(1)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

fn log_softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let cols = x.cols();
    for row in out.data_mut().chunks_exact_mut(cols.max(1)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}
