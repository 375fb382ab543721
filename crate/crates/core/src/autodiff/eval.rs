use std::borrow::Cow;
use std::collections::HashMap;

use super::{AutodiffError, NodeId, Op, Result, Tape};
use crate::tensor::{matmul, matmul_lhs_t, Real, Tensor};

/// Borrowed input values for one evaluation.
#[derive(Debug, Default)]
pub struct Bindings<'a, T> {
    values: HashMap<NodeId, &'a Tensor<T>>,
}

impl<'a, T: Real> Bindings<'a, T> {
    pub fn new() -> Self {
        Self {
            values: HashMap::new(),
        }
    }

    pub fn from_owned(map: &'a HashMap<NodeId, Tensor<T>>) -> Self {
        Self {
            values: map.iter().map(|(k, v)| (*k, v)).collect(),
        }
    }

    pub fn bind(&mut self, node: NodeId, value: &'a Tensor<T>) -> &mut Self {
        self.values.insert(node, value);
        self
    }

    pub fn get(&self, node: NodeId) -> Option<&'a Tensor<T>> {
        self.values.get(&node).copied()
    }
}

/// Values of every node after a forward pass.
#[derive(Debug)]
pub struct Evaluation<'a, T: Real> {
    values: Vec<Cow<'a, Tensor<T>>>,
}

impl<'a, T: Real> Evaluation<'a, T> {
    pub fn value(&self, node: NodeId) -> &Tensor<T> {
        &self.values[node.index()]
    }
}

/// Gradients of a scalar with respect to every input node.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: HashMap<NodeId, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, node: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(&node)
    }

    pub fn take(&mut self, node: NodeId) -> Option<Tensor<T>> {
        self.grads.remove(&node)
    }
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes checked at build time")
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn row_norms<T: Real>(x: &Tensor<T>) -> Vec<T> {
    (0..x.rows())
        .map(|r| x.row(r).iter().fold(T::zero(), |a, &v| a + v * v).sqrt())
        .collect()
}

impl Tape {
    /// Evaluates every node. Identical bindings give bit-identical values.
    pub fn forward<'a, T: Real>(&self, bindings: &Bindings<'a, T>) -> Result<Evaluation<'a, T>> {
        let mut values: Vec<Cow<'a, Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let arg = |k: usize| -> &Tensor<T> { &values[node.inputs[k].index()] };
            let out: Cow<'a, Tensor<T>> = match &node.op {
                Op::Input => {
                    let v = bindings
                        .get(NodeId(idx))
                        .ok_or(AutodiffError::Unbound(idx))?;
                    if v.shape() != node.shape.as_slice() {
                        return Err(AutodiffError::NodeShape {
                            node: idx,
                            op: "input",
                            detail: format!("bound {:?}, declared {:?}", v.shape(), node.shape),
                        });
                    }
                    Cow::Borrowed(v)
                }
                Op::Constant(c) => Cow::Owned(c.cast()),
                op => Cow::Owned(self.apply(op, &node.inputs, &node.shape, &arg)),
            };
            if !out.is_finite() {
                return Err(AutodiffError::NonFinite {
                    node: idx,
                    op: node.op.name(),
                });
            }
            values.push(out);
        }
        Ok(Evaluation { values })
    }

    fn apply<'v, T: Real>(
        &self,
        op: &Op,
        inputs: &[NodeId],
        shape: &[usize],
        arg: &impl Fn(usize) -> &'v Tensor<T>,
    ) -> Tensor<T> {
        match op {
            Op::Input | Op::Constant(_) => unreachable!(),
            Op::MatMul { transpose_rhs } => matmul(arg(0), arg(1), *transpose_rhs),
            Op::Add => zip_map(arg(0), arg(1), |x, y| x + y),
            Op::Sub => zip_map(arg(0), arg(1), |x, y| x - y),
            Op::Mul => zip_map(arg(0), arg(1), |x, y| x * y),
            Op::AddRow => {
                let (a, row) = (arg(0), arg(1));
                let mut out = a.clone();
                for r in 0..out.rows() {
                    for (o, &v) in out.row_mut(r).iter_mut().zip(row.data()) {
                        *o = *o + v;
                    }
                }
                out
            }
            Op::Sigmoid => arg(0).map(sigmoid),
            Op::Tanh => arg(0).map(|x| x.tanh()),
            Op::Relu => arg(0).map(|x| if x > T::zero() { x } else { T::zero() }),
            Op::MaxConst(c) => {
                let c = T::of_f64(*c);
                arg(0).map(|x| if x > c { x } else { c })
            }
            Op::Sum => Tensor::scalar(arg(0).data().iter().fold(T::zero(), |a, &v| a + v)),
            Op::SquaredNorm => Tensor::scalar(arg(0).squared_norm()),
            Op::NormalizeRows => {
                let x = arg(0);
                let norms = row_norms(x);
                let mut out = x.clone();
                for (r, &n) in norms.iter().enumerate() {
                    if n > T::zero() {
                        out.row_mut(r).iter_mut().for_each(|v| *v = *v / n);
                    }
                }
                out
            }
            Op::Abs => arg(0).map(|x| x.abs()),
            Op::GatherRows(idx) => {
                let x = arg(0);
                let data = idx.iter().flat_map(|&r| x.row(r).iter().copied()).collect();
                Tensor::new(shape.to_vec(), data).expect("checked")
            }
            Op::SliceRows { start, end } => {
                let x = arg(0);
                let c = x.cols();
                Tensor::new(shape.to_vec(), x.data()[start * c..end * c].to_vec()).expect("checked")
            }
            Op::SliceCols { start, end } => {
                let x = arg(0);
                let data = (0..x.rows())
                    .flat_map(|r| x.row(r)[*start..*end].iter().copied())
                    .collect();
                Tensor::new(shape.to_vec(), data).expect("checked")
            }
            Op::Concat { axis } => {
                let parts: Vec<&Tensor<T>> = (0..inputs.len()).map(arg).collect();
                let data = if *axis == 0 {
                    parts
                        .iter()
                        .flat_map(|p| p.data().iter().copied())
                        .collect()
                } else {
                    (0..shape[0])
                        .flat_map(|r| parts.iter().flat_map(move |p| p.row(r).iter().copied()))
                        .collect()
                };
                Tensor::new(shape.to_vec(), data).expect("checked")
            }
            Op::Scale(c) => {
                let c = T::of_f64(*c);
                arg(0).map(|x| x * c)
            }
        }
    }

    /// Reverse pass from the scalar node `wrt`. Every input node receives a
    /// gradient of its own shape (zeros when `wrt` does not depend on it).
    /// Kinks of `max` and `abs` take subgradient 0.
    pub fn backward<T: Real>(&self, eval: &Evaluation<'_, T>, wrt: NodeId) -> Result<Gradients<T>> {
        self.check_id(wrt)?;
        if self.value_count(wrt) != 1 {
            return Err(AutodiffError::NotScalar {
                node: wrt.index(),
                shape: self.shape(wrt).to_vec(),
            });
        }
        let n = wrt.index() + 1;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; n];
        grads[wrt.index()] = Some(Tensor::filled(self.shape(wrt), T::one()));

        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Input) {
                grads[idx] = Some(g);
                continue;
            }
            let val = |k: usize| eval.value(node.inputs[k]);
            let out = eval.value(NodeId(idx));
            let contributions: Vec<Tensor<T>> = match &node.op {
                Op::Input | Op::Constant(_) => Vec::new(),
                Op::MatMul {
                    transpose_rhs: false,
                } => {
                    vec![matmul(&g, val(1), true), matmul_lhs_t(val(0), &g)]
                }
                Op::MatMul {
                    transpose_rhs: true,
                } => {
                    vec![matmul(&g, val(1), false), matmul_lhs_t(&g, val(0))]
                }
                Op::Add => vec![g.clone(), g],
                Op::Sub => vec![g.clone(), g.map(|v| -v)],
                Op::Mul => vec![
                    zip_map(&g, val(1), |a, b| a * b),
                    zip_map(&g, val(0), |a, b| a * b),
                ],
                Op::AddRow => {
                    let mut row = Tensor::zeros(self.shape(node.inputs[1]));
                    for r in 0..g.rows() {
                        for (acc, &v) in row.data_mut().iter_mut().zip(g.row(r)) {
                            *acc = *acc + v;
                        }
                    }
                    vec![g, row]
                }
                Op::Sigmoid => vec![zip_map(&g, out, |gv, y| gv * y * (T::one() - y))],
                Op::Tanh => vec![zip_map(&g, out, |gv, y| gv * (T::one() - y * y))],
                Op::Relu => vec![zip_map(&g, val(0), |gv, x| {
                    if x > T::zero() {
                        gv
                    } else {
                        T::zero()
                    }
                })],
                Op::MaxConst(c) => {
                    let c = T::of_f64(*c);
                    vec![zip_map(
                        &g,
                        val(0),
                        |gv, x| if x > c { gv } else { T::zero() },
                    )]
                }
                Op::Sum => vec![Tensor::filled(self.shape(node.inputs[0]), g.item())],
                Op::SquaredNorm => {
                    let s = g.item() + g.item();
                    vec![val(0).map(|x| x * s)]
                }
                Op::NormalizeRows => {
                    let x = val(0);
                    let norms = row_norms(x);
                    let mut dx = Tensor::zeros(x.shape());
                    for (r, &nrm) in norms.iter().enumerate() {
                        if nrm <= T::zero() {
                            continue;
                        }
                        let y = out.row(r);
                        let gr = g.row(r);
                        let dot = y
                            .iter()
                            .zip(gr)
                            .fold(T::zero(), |a, (&yv, &gv)| a + yv * gv);
                        for ((d, &yv), &gv) in dx.row_mut(r).iter_mut().zip(y).zip(gr) {
                            *d = (gv - yv * dot) / nrm;
                        }
                    }
                    vec![dx]
                }
                Op::Abs => vec![zip_map(&g, val(0), |gv, x| {
                    if x > T::zero() {
                        gv
                    } else if x < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                })],
                Op::GatherRows(rows) => {
                    let mut dx = Tensor::zeros(self.shape(node.inputs[0]));
                    for (k, &r) in rows.iter().enumerate() {
                        for (d, &v) in dx.row_mut(r).iter_mut().zip(g.row(k)) {
                            *d = *d + v;
                        }
                    }
                    vec![dx]
                }
                Op::SliceRows { start, .. } => {
                    let mut dx = Tensor::zeros(self.shape(node.inputs[0]));
                    let c = dx.cols();
                    dx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    vec![dx]
                }
                Op::SliceCols { start, end } => {
                    let mut dx = Tensor::zeros(self.shape(node.inputs[0]));
                    for r in 0..g.rows() {
                        dx.row_mut(r)[*start..*end].copy_from_slice(g.row(r));
                    }
                    vec![dx]
                }
                Op::Concat { axis } => {
                    let mut parts = Vec::with_capacity(node.inputs.len());
                    let mut offset = 0;
                    for &inp in &node.inputs {
                        let shape = self.shape(inp);
                        let part = if *axis == 0 {
                            let c = shape[1];
                            let len = shape[0] * c;
                            let d = g.data()[offset * c..offset * c + len].to_vec();
                            offset += shape[0];
                            d
                        } else {
                            let d = (0..shape[0])
                                .flat_map(|r| g.row(r)[offset..offset + shape[1]].iter().copied())
                                .collect();
                            offset += shape[1];
                            d
                        };
                        parts.push(Tensor::new(shape.to_vec(), part).expect("checked"));
                    }
                    parts
                }
                Op::Scale(c) => {
                    let c = T::of_f64(*c);
                    vec![g.map(|v| v * c)]
                }
            };
            for (&inp, contrib) in node.inputs.iter().zip(contributions) {
                let slot = &mut grads[inp.index()];
                match slot {
                    Some(acc) => {
                        for (a, &v) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a = *a + v;
                        }
                    }
                    None => *slot = Some(contrib),
                }
            }
        }

        let mut out = HashMap::new();
        for id in self.inputs() {
            let g = grads.get_mut(id.index()).and_then(Option::take);
            out.insert(id, g.unwrap_or_else(|| Tensor::zeros(self.shape(id))));
        }
        Ok(Gradients { grads: out })
    }
}
