//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] borrows a [`ParamStore`] for the duration of one forward pass and
//! records every operation in topological order. [`Tape::backward`] walks the
//! record from a scalar root towards the leaves and returns gradients for the
//! parameters it reaches.
//!
//! Backward passes are *routed*: a [`Routing`] can freeze whole parameter groups
//! (gradient still flows *through* their values, but nothing is accumulated for
//! them) and can sever the graph at chosen nodes (no gradient flows past them).
//! This is how one forward pass serves several losses that each train a
//! different part of a model.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{Owner, ParamId, ParamStore};
use crate::tensor::{conv2d_backward, conv2d_forward, maxpool2x2_forward, ConvGeometry, Tensor};

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Tensor),
    Relu(Var),
    MaxPool2x2(Var, Vec<usize>),
    Reshape(Var),
    Transpose(Var),
    Conv2d(Var, Var, ConvGeometry),
    Sum(Var),
    Mean(Var),
    Log(Var),
    Exp(Var),
    LogSoftmax(Var),
    Gather(Var, Vec<usize>),
    GatherGroup(Var, Vec<usize>),
    Concat(Vec<Var>),
    ClampMin(Var, f64),
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Param(_) => vec![],
            Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Add(a, b) | Op::Conv2d(a, b, _) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::MulConst(x, _)
            | Op::Relu(x)
            | Op::MaxPool2x2(x, _)
            | Op::Reshape(x)
            | Op::Transpose(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Log(x)
            | Op::Exp(x)
            | Op::LogSoftmax(x)
            | Op::Gather(x, _)
            | Op::GatherGroup(x, _)
            | Op::ClampMin(x, _) => vec![*x],
            Op::Concat(xs) => xs.clone(),
        }
    }
}

struct Node {
    /// `None` for parameter leaves, whose value lives in the store.
    value: Option<Tensor>,
    op: Op,
}

/// Which parameters collect gradient, and where propagation stops.
#[derive(Clone, Debug, Default)]
pub struct Routing {
    frozen: Vec<Owner>,
    severed: Vec<Var>,
}

impl Routing {
    /// Every parameter reachable from the root receives its gradient.
    pub fn all() -> Self {
        Self::default()
    }

    pub fn freeze(mut self, owner: Owner) -> Self {
        self.frozen.push(owner);
        self
    }

    pub fn sever(mut self, at: Var) -> Self {
        self.severed.push(at);
        self
    }

    fn is_frozen(&self, owner: Owner) -> bool {
        self.frozen.contains(&owner)
    }
}

/// Parameter gradients produced by one backward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: HashMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.grads.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(id, g)| (*id, g))
    }

    /// Gradient for `id`, or zeros shaped like the parameter when the pass never reached it.
    pub fn get_or_zeros(&self, id: ParamId, store: &ParamStore) -> Tensor {
        self.grads.get(&id).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).value.shape()))
    }

    pub(crate) fn from_pairs(pairs: impl IntoIterator<Item = (ParamId, Tensor)>) -> Self {
        let mut out = Self::default();
        for (id, g) in pairs {
            out.accumulate(id, g);
        }
        out
    }

    fn accumulate(&mut self, id: ParamId, g: Tensor) {
        match self.grads.get_mut(&id) {
            Some(acc) => acc.add_assign(&g).expect("parameter gradient shape is fixed"),
            None => {
                self.grads.insert(id, g);
            }
        }
    }
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
    spent_roots: Vec<Var>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::new(), param_nodes: HashMap::new(), spent_roots: Vec::new() }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Discards all recorded nodes so the tape can record a fresh forward pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.param_nodes.clear();
        self.spent_roots.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => &self.params.get(*id).value,
            (None, _) => unreachable!("only parameter leaves borrow their value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value: Some(value), op });
        Var(self.nodes.len() - 1)
    }

    /// A constant input (no gradient).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        self.nodes.push(Node { value: None, op: Op::Param(id) });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// Adds `bias[c]` along axis 1 of a `[batch×C]` or `[batch×C×H×W]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let channels = *xv.shape().get(1).ok_or_else(|| Error::dim("add_bias", "input has no channel axis"))?;
        if bv.shape() != [channels] {
            return Err(Error::dim("add_bias", format!("bias {:?} for {channels} channels", bv.shape())));
        }
        let inner: usize = xv.shape()[2..].iter().product();
        let b = bv.data();
        let mut out = xv.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += b[(i / inner) % channels];
        }
        Ok(self.push(out, Op::AddBias(x, bias)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c))
    }

    /// Elementwise product with a constant tensor (dropout masks, soft targets).
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        let out = self.value(x).zip_map(&c, |a, b| a * b)?;
        Ok(self.push(out, Op::MulConst(x, c)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(out, Op::Relu(x))
    }

    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = maxpool2x2_forward(self.value(x))?;
        Ok(self.push(out, Op::MaxPool2x2(x, argmax)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        Ok(self.push(out, Op::Transpose(x)))
    }

    /// Collapses all but the leading axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        let (b, rest) = (shape[0], shape[1..].iter().product::<usize>());
        self.reshape(x, &[b, rest])
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let g = ConvGeometry::new(self.value(x), self.value(kernel), stride, pad)?;
        let out = conv2d_forward(self.value(x), self.value(kernel), &g);
        Ok(self.push(out, Op::Conv2d(x, kernel, g)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(out, Op::Mean(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if let Some(&bad) = t.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain { op: "log", value: bad });
        }
        let out = t.map(f64::ln);
        Ok(self.push(out, Op::Log(x)))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        self.push(out, Op::Exp(x))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).log_softmax()?;
        Ok(self.push(out, Op::LogSoftmax(x)))
    }

    /// Picks `x[b, index[b]]` from each row of `x` viewed as `[batch, rest]`.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (rows, width) = (t.shape()[0], t.row_width());
        if index.len() != rows {
            return Err(Error::dim("gather", format!("{} indices for {rows} rows", index.len())));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= width) {
            return Err(Error::dim("gather", format!("index {bad} out of range for row width {width}")));
        }
        let out = index.iter().enumerate().map(|(b, &i)| t.data()[b * width + i]).collect();
        let out = Tensor::new(vec![rows], out)?;
        Ok(self.push(out, Op::Gather(x, index.to_vec())))
    }

    /// Selects group `index[b]` from a `[batch×G×n]` tensor, yielding `[batch×n]`.
    pub fn gather_group(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (b, g, n) = match t.shape()[..] {
            [b, g, n] => (b, g, n),
            _ => return Err(Error::dim("gather_group", format!("expected [batch×G×n], got {:?}", t.shape()))),
        };
        if index.len() != b {
            return Err(Error::dim("gather_group", format!("{} indices for batch of {b}", index.len())));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= g) {
            return Err(Error::dim("gather_group", format!("group {bad} out of range for {g} groups")));
        }
        let mut out = Vec::with_capacity(b * n);
        for (row, &grp) in index.iter().enumerate() {
            let start = (row * g + grp) * n;
            out.extend_from_slice(&t.data()[start..start + n]);
        }
        let out = Tensor::new(vec![b, n], out)?;
        Ok(self.push(out, Op::GatherGroup(x, index.to_vec())))
    }

    /// Concatenates `[batch×k_i]` matrices along the column axis.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::dim("concat_cols", "no inputs"))?;
        let rows = self.value(*first).shape()[0];
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (r, w) = self.value(x).dims2("concat_cols")?;
            if r != rows {
                return Err(Error::dim("concat_cols", format!("row counts {rows} and {r} differ")));
            }
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &x in xs {
                out.extend_from_slice(self.value(x).row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], out)?;
        Ok(self.push(out, Op::Concat(xs.to_vec())))
    }

    /// `max(x, floor)` elementwise; entries at the floor pass no gradient.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        let out = self.value(x).map(|v| v.max(floor));
        self.push(out, Op::ClampMin(x, floor))
    }

    /// Backpropagates from the scalar `root`, honouring `routing`.
    ///
    /// Each root may be backpropagated once per recorded forward pass; call
    /// [`Tape::reset`] (or build a new tape) before reusing it.
    pub fn backward(&mut self, root: Var, routing: &Routing) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::Usage(format!("backward from non-scalar of shape {:?}", self.shape(root))));
        }
        if self.spent_roots.contains(&root) {
            return Err(Error::Usage("tape reused: this root was already backpropagated".into()));
        }
        self.spent_roots.push(root);

        let needs = self.needs_grad(root, routing);
        let mut result = Gradients::default();
        if !needs[root.0] {
            return Ok(result);
        }
        let mut adj: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        adj[root.0] = Some(Tensor::full(self.shape(root), 1.0));

        for i in (0..=root.0).rev() {
            if !needs[i] {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            let mut send = |v: Var, t: Tensor| {
                if needs[v.0] {
                    match adj[v.0].as_mut() {
                        Some(acc) => acc.add_assign(&t).expect("adjoint shape matches node value"),
                        None => adj[v.0] = Some(t),
                    }
                }
            };
            match &node.op {
                Op::Input => {}
                Op::Param(id) => result.accumulate(*id, g),
                Op::MatMul(a, b) => {
                    if needs[a.0] {
                        send(*a, g.matmul(&self.value(*b).transpose()?)?);
                    }
                    if needs[b.0] {
                        send(*b, self.value(*a).transpose()?.matmul(&g)?);
                    }
                }
                Op::AddBias(x, bias) => {
                    if needs[bias.0] {
                        let channels = self.value(*bias).len();
                        let inner: usize = g.shape()[2..].iter().product();
                        let mut db = vec![0.0; channels];
                        for (k, v) in g.data().iter().enumerate() {
                            db[(k / inner) % channels] += v;
                        }
                        send(*bias, Tensor::new(vec![channels], db)?);
                    }
                    send(*x, g);
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Scale(x, c) => send(*x, g.map(|v| v * c)),
                Op::MulConst(x, c) => send(*x, g.zip_map(c, |a, b| a * b)?),
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    send(*x, g.zip_map(xv, |gv, v| if v > 0.0 { gv } else { 0.0 })?);
                }
                Op::MaxPool2x2(x, argmax) => {
                    let mut dx = Tensor::zeros(self.shape(*x));
                    for (gv, &src) in g.data().iter().zip(argmax) {
                        dx.data_mut()[src] += gv;
                    }
                    send(*x, dx);
                }
                Op::Reshape(x) => send(*x, g.reshape(self.shape(*x))?),
                Op::Transpose(x) => send(*x, g.transpose()?),
                Op::Conv2d(x, k, geom) => {
                    let (dx, dk) =
                        conv2d_backward(self.value(*x), self.value(*k), &g, geom, needs[x.0], needs[k.0]);
                    if let Some(dx) = dx {
                        send(*x, dx);
                    }
                    if let Some(dk) = dk {
                        send(*k, dk);
                    }
                }
                Op::Sum(x) => send(*x, Tensor::full(self.shape(*x), g.data()[0])),
                Op::Mean(x) => {
                    let n = self.value(*x).len() as f64;
                    send(*x, Tensor::full(self.shape(*x), g.data()[0] / n));
                }
                Op::Log(x) => send(*x, g.zip_map(self.value(*x), |gv, v| gv / v)?),
                Op::Exp(x) => {
                    let y = node.value.as_ref().expect("exp output recorded");
                    send(*x, g.zip_map(y, |gv, v| gv * v)?);
                }
                Op::LogSoftmax(x) => {
                    let y = node.value.as_ref().expect("log_softmax output recorded");
                    let k = *y.shape().last().expect("log_softmax input has a class axis");
                    let mut dx = g.clone();
                    for (drow, yrow) in dx.data_mut().chunks_mut(k).zip(y.data().chunks(k)) {
                        let total: f64 = drow.iter().sum();
                        for (d, &lp) in drow.iter_mut().zip(yrow) {
                            *d -= lp.exp() * total;
                        }
                    }
                    send(*x, dx);
                }
                Op::Gather(x, index) => {
                    let mut dx = Tensor::zeros(self.shape(*x));
                    let width = dx.row_width();
                    for (b, (&i, &gv)) in index.iter().zip(g.data()).enumerate() {
                        dx.data_mut()[b * width + i] += gv;
                    }
                    send(*x, dx);
                }
                Op::GatherGroup(x, index) => {
                    let mut dx = Tensor::zeros(self.shape(*x));
                    let (groups, n) = (dx.shape()[1], dx.shape()[2]);
                    for (row, &grp) in index.iter().enumerate() {
                        let start = (row * groups + grp) * n;
                        for (d, &gv) in dx.data_mut()[start..start + n].iter_mut().zip(g.row(row)) {
                            *d += gv;
                        }
                    }
                    send(*x, dx);
                }
                Op::Concat(xs) => {
                    let rows = g.shape()[0];
                    let mut offset = 0;
                    for &x in xs {
                        let w = self.shape(x)[1];
                        if needs[x.0] {
                            let mut part = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                part.extend_from_slice(&g.row(r)[offset..offset + w]);
                            }
                            send(x, Tensor::new(vec![rows, w], part)?);
                        }
                        offset += w;
                    }
                }
                Op::ClampMin(x, floor) => {
                    let xv = self.value(*x);
                    send(*x, g.zip_map(xv, |gv, v| if v >= *floor { gv } else { 0.0 })?);
                }
            }
        }
        Ok(result)
    }

    /// Marks nodes that lie on a path from an unfrozen parameter to `root` without crossing a severed node.
    fn needs_grad(&self, root: Var, routing: &Routing) -> Vec<bool> {
        let mut needs = vec![false; root.0 + 1];
        for i in 0..=root.0 {
            if routing.severed.contains(&Var(i)) {
                continue;
            }
            needs[i] = match &self.nodes[i].op {
                Op::Input => false,
                Op::Param(id) => !routing.is_frozen(self.params.get(*id).owner),
                op => op.parents().iter().any(|p| needs[p.0]),
            };
        }
        needs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[(&str, Owner, Tensor)]) -> (ParamStore, Vec<ParamId>) {
        let mut store = ParamStore::new();
        let ids = values.iter().map(|(n, o, t)| store.insert(*n, *o, t.clone(), true)).collect();
        (store, ids)
    }

    #[test]
    fn relu_values_and_subgradient_at_zero() {
        let (store, ids) =
            store_with(&[("x", Owner::FeatureExtractor, Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap())]);
        let mut tape = Tape::new(&store);
        let x = tape.param(ids[0]);
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y);
        let g = tape.backward(s, &Routing::all()).unwrap();
        assert_eq!(g.get(ids[0]).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn sum_distributes_ones() {
        let w = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.3 - 1.0);
        let (store, ids) = store_with(&[("w", Owner::ClassHead, w)]);
        let mut tape = Tape::new(&store);
        let p = tape.param(ids[0]);
        let s = tape.sum(p);
        let g = tape.backward(s, &Routing::all()).unwrap();
        assert_eq!(g.get(ids[0]).unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn zero_scaled_loss_has_zero_gradient() {
        let (store, ids) = store_with(&[("w", Owner::ClassHead, Tensor::from_fn(&[4], |i| i as f64 + 0.5))]);
        let mut tape = Tape::new(&store);
        let p = tape.param(ids[0]);
        let l = tape.log(p).unwrap();
        let s = tape.sum(l);
        let z = tape.scale(s, 0.0);
        let g = tape.backward(z, &Routing::all()).unwrap();
        assert!(g.get(ids[0]).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn log_rejects_non_positive() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
        assert!(matches!(tape.log(x), Err(Error::Domain { op: "log", .. })));
    }

    #[test]
    fn non_scalar_backward_is_usage_error() {
        let (store, ids) = store_with(&[("w", Owner::ClassHead, Tensor::ones(&[3]))]);
        let mut tape = Tape::new(&store);
        let p = tape.param(ids[0]);
        let y = tape.exp(p);
        assert!(matches!(tape.backward(y, &Routing::all()), Err(Error::Usage(_))));
    }

    #[test]
    fn reusing_root_without_reset_fails() {
        let (store, ids) = store_with(&[("w", Owner::ClassHead, Tensor::ones(&[3]))]);
        let mut tape = Tape::new(&store);
        let p = tape.param(ids[0]);
        let s = tape.sum(p);
        tape.backward(s, &Routing::all()).unwrap();
        assert!(matches!(tape.backward(s, &Routing::all()), Err(Error::Usage(_))));
        tape.reset();
        assert!(tape.is_empty());
        let p = tape.param(ids[0]);
        let s = tape.sum(p);
        assert!(tape.backward(s, &Routing::all()).is_ok());
    }

    #[test]
    fn frozen_group_passes_gradient_through() {
        // loss = sum(w_frozen * x_trainable) routed with w frozen: x still gets w.
        let (store, ids) = store_with(&[
            ("x", Owner::FeatureExtractor, Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap()),
            ("w", Owner::RndHeads, Tensor::new(vec![2, 1], vec![3.0, -4.0]).unwrap()),
        ]);
        let mut tape = Tape::new(&store);
        let (x, w) = (tape.param(ids[0]), tape.param(ids[1]));
        let y = tape.matmul(x, w).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s, &Routing::all().freeze(Owner::RndHeads)).unwrap();
        assert_eq!(g.get(ids[0]).unwrap().data(), &[3.0, -4.0]);
        assert!(!g.contains(ids[1]));
    }

    #[test]
    fn severed_node_blocks_upstream() {
        let (store, ids) = store_with(&[
            ("x", Owner::FeatureExtractor, Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap()),
            ("w", Owner::RndHeads, Tensor::new(vec![2, 1], vec![3.0, -4.0]).unwrap()),
        ]);
        let mut tape = Tape::new(&store);
        let x = tape.param(ids[0]);
        let feat = tape.relu(x);
        let w = tape.param(ids[1]);
        let y = tape.matmul(feat, w).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s, &Routing::all().sever(feat)).unwrap();
        assert!(!g.contains(ids[0]));
        assert_eq!(g.get(ids[1]).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn conv_zero_kernel_and_delta_kernel() {
        let x = Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64 - 4.0);
        let (store, ids) = store_with(&[
            ("zero", Owner::FeatureExtractor, Tensor::zeros(&[1, 1, 3, 3])),
            ("delta", Owner::FeatureExtractor, Tensor::from_fn(&[1, 1, 3, 3], |i| if i == 4 { 1.0 } else { 0.0 })),
        ]);
        let mut tape = Tape::new(&store);
        let xi = tape.input(x.clone());
        let kz = tape.param(ids[0]);
        let kd = tape.param(ids[1]);
        let z = tape.conv2d(xi, kz, 1, 1).unwrap();
        assert_eq!(tape.value(z), &Tensor::zeros(&[1, 1, 3, 3]));
        let d = tape.conv2d(xi, kd, 1, 1).unwrap();
        assert_eq!(tape.value(d), &x);
    }

    #[test]
    fn gather_group_selects_head() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::from_fn(&[2, 3, 2], |i| i as f64));
        let y = tape.gather_group(x, &[2, 0]).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0, 5.0, 6.0, 7.0]);
        assert!(tape.gather_group(x, &[3, 0]).is_err());
    }
}
