//! Reverse-mode differentiation over row-major matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamSet`] and never copied; constants are owned by the
//! graph. [`Graph::backward`] walks the tape once in reverse and returns the
//! gradient of a scalar node with respect to every parameter that took part.

use std::fmt::Debug;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive, NumAssign};

/// Scalar element type accepted by the graph (`f32` for training, `f64` for
/// gradient checks).
pub trait Real:
    Float
    + NumAssign
    + FromPrimitive
    + ScalarOperand
    + ndarray::LinalgScalar
    + std::iter::Sum
    + Send
    + Sync
    + Debug
    + std::fmt::Display
    + 'static
{
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal fits scalar type")
    }
}

impl Real for f32 {}
impl Real for f64 {}

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const COSINE_EPS: f64 = 1e-8;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    values: Vec<Array2<T>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array2<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Array2<T>> {
        self.values.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Element-type conversion, used to run the same model in `f64`.
    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.mapv(|x| U::from_f64(x.to_f64().unwrap()).unwrap()))
                .collect(),
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<T>,
        inv_std: Vec<T>,
    },
    Softmax(Var),
    Gelu(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    /// `1 - cos(vec(x), vec(target))` against a constant target.
    CosineDistance {
        x: Var,
        target: Array2<T>,
    },
    SumScalars(Vec<Var>),
}

struct Node<T> {
    value: Option<Array2<T>>,
    op: Op<T>,
}

pub struct Graph<'p, T> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<T>>,
}

/// Parameter gradients produced by [`Graph::backward`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub grads: Vec<Option<Array2<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(params: &ParamSet<T>) -> Self {
        Self {
            grads: vec![None; params.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn accumulate(&mut self, other: &Gradients<T>) {
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(src) = src {
                match dst {
                    Some(d) => *d += src,
                    None => *dst = Some(src.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, k: T) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * k);
        }
    }

    pub fn global_norm(&self) -> T {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|&x| x * x).sum::<T>())
            .sum::<T>()
            .sqrt()
    }
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let value = half * x * (T::one() + t);
    let dinner = c * (T::one() + T::lit(3.0) * a * x * x);
    let deriv = half * (T::one() + t) + half * x * (T::one() - t * t) * dinner;
    (value, deriv)
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(512),
        }
    }

    pub fn params(&self) -> &'p ParamSet<T> {
        self.params
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(val), _) => val,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Const)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(out, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    /// `x + row` where `row` is `1 × n`, broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let out = self.value(x) + self.value(row);
        self.push(out, Op::AddRow(x, row))
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let out = self.value(x) * k;
        self.push(out, Op::Scale(x, k))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        let n = T::from_usize(cols).unwrap();
        let eps = T::lit(LAYER_NORM_EPS);
        let mut xhat = Array2::<T>::zeros((rows, cols));
        let mut inv_std = Vec::with_capacity(rows);
        for (r, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let istd = T::one() / (var + eps).sqrt();
            inv_std.push(istd);
            for (o, &v) in xhat.row_mut(r).iter_mut().zip(row.iter()) {
                *o = (v - mean) * istd;
            }
        }
        let out = &(&xhat * self.value(gamma)) + self.value(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for mut row in out.rows_mut() {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        self.push(out, Op::Softmax(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| gelu_parts(v).0);
        self.push(out, Op::Gelu(x))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<T>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = concatenate(Axis(0), &views).expect("concat_rows shape mismatch");
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<T>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = concatenate(Axis(1), &views).expect("concat_cols shape mismatch");
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice(s![start..start + len, ..]).to_owned();
        self.push(out, Op::SliceRows(x, start))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(out, Op::SliceCols(x, start))
    }

    pub fn cosine_distance(&mut self, x: Var, target: Array2<T>) -> Var {
        let d = cosine_distance(self.value(x).view(), target.view());
        self.push(
            Array2::from_elem((1, 1), d),
            Op::CosineDistance { x, target },
        )
    }

    pub fn sum_scalars(&mut self, parts: &[Var]) -> Var {
        let total = parts.iter().map(|&p| self.value(p)[[0, 0]]).sum::<T>();
        self.push(
            Array2::from_elem((1, 1), total),
            Op::SumScalars(parts.to_vec()),
        )
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[[0, 0]]
    }

    /// Values of every softmax node recorded so far (attention probabilities).
    pub fn softmax_outputs(&self) -> impl Iterator<Item = &Array2<T>> {
        self.nodes.iter().filter_map(|n| match n.op {
            Op::Softmax(_) => n.value.as_ref(),
            _ => None,
        })
    }

    /// Gradient of the scalar node `output` with respect to every parameter.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        self.backward_with_inputs(output, &[]).0
    }

    /// Like [`Graph::backward`], additionally returning gradients for the
    /// listed non-parameter nodes (used by finite-difference checks).
    pub fn backward_with_inputs(&self, output: Var, wrt: &[Var]) -> (Gradients<T>, Vec<Array2<T>>) {
        assert_eq!(self.shape(output), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Array2::from_elem((1, 1), T::one()));
        let mut param_grads = Gradients::zeros_like(self.params);

        fn acc<T: Real>(slot: &mut Option<Array2<T>>, g: Array2<T>) {
            match slot {
                Some(s) => *s += &g,
                None => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Const => {
                    grads[idx] = Some(g);
                }
                Op::Param(id) => {
                    let slot = &mut param_grads.grads[id.0];
                    match slot {
                        Some(s) => *s += &g,
                        None => *slot = Some(g),
                    }
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads[a.0], ga);
                    acc(&mut grads[b.0], gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    acc(&mut grads[a.0], ga);
                    acc(&mut grads[b.0], gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads[b.0], g.clone());
                    acc(&mut grads[a.0], g);
                }
                Op::AddRow(x, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads[row.0], gr);
                    acc(&mut grads[x.0], g);
                }
                Op::Scale(x, k) => {
                    acc(&mut grads[x.0], g * *k);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gamma_v = self.value(*gamma);
                    let gbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let ggamma = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &g * gamma_v;
                    let cols = T::from_usize(xhat.ncols()).unwrap();
                    let mut gx = Array2::<T>::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let mean_dh = dh.sum() / cols;
                        let mean_dhx =
                            dh.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>() / cols;
                        let istd = inv_std[r];
                        Zip::from(gx.row_mut(r))
                            .and(&dh)
                            .and(&xh)
                            .for_each(|o, &d, &h| {
                                *o = istd * (d - mean_dh - h * mean_dhx);
                            });
                    }
                    acc(&mut grads[gamma.0], ggamma);
                    acc(&mut grads[beta.0], gbeta);
                    acc(&mut grads[x.0], gx);
                }
                Op::Softmax(x) => {
                    let y = node.value.as_ref().unwrap();
                    let mut gx = &g * y;
                    for (mut row, yrow) in gx.rows_mut().into_iter().zip(y.rows()) {
                        let dot = row.sum();
                        Zip::from(&mut row)
                            .and(&yrow)
                            .for_each(|o, &yv| *o -= yv * dot);
                    }
                    acc(&mut grads[x.0], gx);
                }
                Op::Gelu(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx)
                        .and(self.value(*x))
                        .for_each(|o, &v| *o *= gelu_parts(v).1);
                    acc(&mut grads[x.0], gx);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = self.value(*p).nrows();
                        acc(
                            &mut grads[p.0],
                            g.slice(s![start..start + n, ..]).to_owned(),
                        );
                        start += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = self.value(*p).ncols();
                        acc(
                            &mut grads[p.0],
                            g.slice(s![.., start..start + n]).to_owned(),
                        );
                        start += n;
                    }
                }
                Op::SliceRows(x, start) => {
                    let mut gx = Array2::<T>::zeros(self.value(*x).dim());
                    gx.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut grads[x.0], gx);
                }
                Op::SliceCols(x, start) => {
                    let mut gx = Array2::<T>::zeros(self.value(*x).dim());
                    gx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads[x.0], gx);
                }
                Op::CosineDistance { x, target } => {
                    let upstream = g[[0, 0]];
                    let gx = cosine_distance_grad(self.value(*x).view(), target.view()) * upstream;
                    acc(&mut grads[x.0], gx);
                }
                Op::SumScalars(parts) => {
                    for p in parts {
                        acc(&mut grads[p.0], g.clone());
                    }
                }
            }
        }

        let inputs = wrt
            .iter()
            .map(|v| {
                grads[v.0]
                    .clone()
                    .unwrap_or_else(|| Array2::zeros(self.value(*v).dim()))
            })
            .collect();
        (param_grads, inputs)
    }
}

/// `1 - <x, t> / ((‖x‖ + ε)(‖t‖ + ε))` over all elements.
pub fn cosine_distance<T: Real>(x: ArrayView2<T>, t: ArrayView2<T>) -> T {
    let eps = T::lit(COSINE_EPS);
    let dot = Zip::from(&x)
        .and(&t)
        .fold(T::zero(), |acc, &a, &b| acc + a * b);
    let nx = x.iter().map(|&v| v * v).sum::<T>().sqrt();
    let nt = t.iter().map(|&v| v * v).sum::<T>().sqrt();
    T::one() - dot / ((nx + eps) * (nt + eps))
}

fn cosine_distance_grad<T: Real>(x: ArrayView2<T>, t: ArrayView2<T>) -> Array2<T> {
    let eps = T::lit(COSINE_EPS);
    let dot = Zip::from(&x)
        .and(&t)
        .fold(T::zero(), |acc, &a, &b| acc + a * b);
    let nx = x.iter().map(|&v| v * v).sum::<T>().sqrt();
    let nt = t.iter().map(|&v| v * v).sum::<T>().sqrt();
    let denom = (nx + eps) * (nt + eps);
    // d/dx of dot/denom; the norm term vanishes at x = 0
    let radial = if nx > T::zero() {
        dot / (denom * (nx + eps) * nx)
    } else {
        T::zero()
    };
    let mut out = Array2::<T>::zeros(x.dim());
    Zip::from(&mut out).and(&x).and(&t).for_each(|o, &xv, &tv| {
        *o = -(tv / denom - radial * xv);
    });
    out
}
