//! Reverse-mode differentiation over a recorded tape of tensor operations.
//!
//! Every op validates its output: a NaN or infinity is returned as
//! [`Error::NonFinite`] instead of being propagated. Nodes whose inputs carry
//! no gradient are recorded as plain leaves, so constant sub-graphs (frozen
//! weights, teacher forwards) cost nothing in the backward pass.

use std::cell::{Ref, RefCell};
use std::collections::BTreeMap;

use super::tensor::{broadcast_shape, broadcast_strides, for_each_broadcast, strides, Tensor};
use crate::error::{dim_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Unary {
    Relu,
    Gelu,
    Sigmoid,
    Exp,
    Ln,
    Abs,
    Sqrt,
    Clamp(f64, f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Maximum(usize, usize),
    Minimum(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    Unary(usize, Unary),
    MatMul {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Narrow {
        a: usize,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Softmax {
        a: usize,
        axis: usize,
    },
    Norm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
        layout: NormLayout,
    },
    Sum(usize),
    Mean(usize),
    SumAxis {
        a: usize,
        axis: usize,
    },
    Take {
        a: usize,
        idx: Vec<usize>,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
    },
}

/// Which axes a normalization reduces over.
#[derive(Debug, Clone, Copy)]
enum NormLayout {
    /// Last axis of an arbitrary tensor (layer norm).
    LastAxis,
    /// Per channel over batch and spatial axes of an `[N, C, H, W]` tensor.
    Channel,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<String>,
}

/// Recorder for one forward pass. Single-threaded by construction.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{} {:?})", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    by_param: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient for a named parameter; `None` when it was frozen or unused.
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_param.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.by_param
    }

    /// Gradient with respect to any recorded value that required one.
    pub fn wrt(&self, var: Var<'_>) -> Option<Tensor> {
        self.grads[var.id]
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[var.id], g.clone()).expect("consistent shape"))
    }

    pub fn global_norm(&self) -> f64 {
        self.by_param
            .values()
            .flat_map(|t| t.data().iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn constant(&self, value: Tensor) -> Result<Var<'_>> {
        value.ensure_finite("constant")?;
        Ok(self.push_raw(value, Op::Leaf, false, None))
    }

    /// Leaf that receives a gradient reported under `name`.
    pub fn param(&self, name: &str, value: &Tensor) -> Result<Var<'_>> {
        value.ensure_finite(name)?;
        Ok(self.push_raw(value.clone(), Op::Leaf, true, Some(name.to_string())))
    }

    fn push_raw(&self, value: Tensor, op: Op, requires_grad: bool, param: Option<String>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            param,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op, inputs: &[usize], what: &str) -> Result<Var<'_>> {
        value.ensure_finite(what)?;
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        let op = if requires_grad { op } else { Op::Leaf };
        Ok(self.push_raw(value, op, requires_grad, None))
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return dim_err("backward needs a scalar loss");
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        let mut by_param: BTreeMap<String, Tensor> = BTreeMap::new();
        for (id, node) in nodes.iter().enumerate() {
            if let Some(name) = &node.param {
                let g = grads[id]
                    .clone()
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                match by_param.get_mut(name) {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                    None => {
                        by_param.insert(name.clone(), Tensor::new(node.value.shape(), g)?);
                    }
                }
            }
        }
        for (name, g) in &by_param {
            g.ensure_finite(&format!("gradient of {name}"))?;
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            grads,
            shapes,
            by_param,
        })
    }
}

fn accumulate<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        &Op::Add(a, b) | &Op::Sub(a, b) => {
            let sign = if matches!(nodes[id].op, Op::Sub(..)) { -1.0 } else { 1.0 };
            reduce_broadcast(nodes, grads, a, out.shape(), g, |_, _, gv| gv);
            reduce_broadcast(nodes, grads, b, out.shape(), g, |_, _, gv| sign * gv);
        }
        &Op::Mul(a, b) => {
            let (va, vb) = (&nodes[a].value, &nodes[b].value);
            let sa = broadcast_strides(va.shape(), out.shape());
            let sb = broadcast_strides(vb.shape(), out.shape());
            if let Some(ga) = accumulate(grads, nodes, a) {
                for_each_broadcast(out.shape(), &sa, &sb, |o, ia, ib| ga[ia] += g[o] * vb.data()[ib]);
            }
            if let Some(gb) = accumulate(grads, nodes, b) {
                for_each_broadcast(out.shape(), &sa, &sb, |o, ia, ib| gb[ib] += g[o] * va.data()[ia]);
            }
        }
        &Op::Div(a, b) => {
            let (va, vb) = (&nodes[a].value, &nodes[b].value);
            let sa = broadcast_strides(va.shape(), out.shape());
            let sb = broadcast_strides(vb.shape(), out.shape());
            if let Some(ga) = accumulate(grads, nodes, a) {
                for_each_broadcast(out.shape(), &sa, &sb, |o, ia, ib| ga[ia] += g[o] / vb.data()[ib]);
            }
            if let Some(gb) = accumulate(grads, nodes, b) {
                for_each_broadcast(out.shape(), &sa, &sb, |o, _ia, ib| {
                    gb[ib] -= g[o] * out.data()[o] / vb.data()[ib]
                });
            }
        }
        &Op::Maximum(a, b) | &Op::Minimum(a, b) => {
            let is_max = matches!(nodes[id].op, Op::Maximum(..));
            let (va, vb) = (&nodes[a].value, &nodes[b].value);
            let sa = broadcast_strides(va.shape(), out.shape());
            let sb = broadcast_strides(vb.shape(), out.shape());
            let pick_a = |ia: usize, ib: usize| {
                let (x, y) = (va.data()[ia], vb.data()[ib]);
                if is_max {
                    x >= y
                } else {
                    x <= y
                }
            };
            if let Some(ga) = accumulate(grads, nodes, a) {
                for_each_broadcast(out.shape(), &sa, &sb, |o, ia, ib| {
                    if pick_a(ia, ib) {
                        ga[ia] += g[o]
                    }
                });
            }
            if let Some(gb) = accumulate(grads, nodes, b) {
                for_each_broadcast(out.shape(), &sa, &sb, |o, ia, ib| {
                    if !pick_a(ia, ib) {
                        gb[ib] += g[o]
                    }
                });
            }
        }
        &Op::Scale(a, s) => {
            if let Some(ga) = accumulate(grads, nodes, a) {
                ga.iter_mut().zip(g).for_each(|(x, gv)| *x += s * gv);
            }
        }
        &Op::Shift(a) | &Op::Reshape(a) => {
            if let Some(ga) = accumulate(grads, nodes, a) {
                ga.iter_mut().zip(g).for_each(|(x, gv)| *x += gv);
            }
        }
        &Op::Unary(a, kind) => {
            let x = nodes[a].value.data();
            let y = out.data();
            if let Some(ga) = accumulate(grads, nodes, a) {
                for i in 0..g.len() {
                    let d = match kind {
                        Unary::Relu => {
                            if x[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Gelu => gelu_grad(x[i]),
                        Unary::Sigmoid => y[i] * (1.0 - y[i]),
                        Unary::Exp => y[i],
                        Unary::Ln => 1.0 / x[i],
                        Unary::Abs => {
                            if x[i] > 0.0 {
                                1.0
                            } else if x[i] < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Sqrt => 0.5 / y[i],
                        Unary::Clamp(lo, hi) => {
                            if x[i] >= lo && x[i] <= hi {
                                1.0
                            } else {
                                0.0
                            }
                        }
                    };
                    ga[i] += g[i] * d;
                }
            }
        }
        &Op::MatMul { a, b, trans_b } => {
            let (va, vb) = (&nodes[a].value, &nodes[b].value);
            let geo = MatGeom::of(va.shape(), vb.shape(), trans_b)?;
            let (m, k, n) = (geo.m, geo.k, geo.n);
            if let Some(ga) = accumulate(grads, nodes, a) {
                for bi in 0..geo.batches {
                    let bo = if geo.shared_b { 0 } else { bi * k * n };
                    gemm(
                        m,
                        n,
                        k,
                        &g[bi * m * n..(bi + 1) * m * n],
                        false,
                        &vb.data()[bo..bo + k * n],
                        !trans_b,
                        &mut ga[bi * m * k..(bi + 1) * m * k],
                    );
                }
            }
            if let Some(gb) = accumulate(grads, nodes, b) {
                for bi in 0..geo.batches {
                    let bo = if geo.shared_b { 0 } else { bi * k * n };
                    let ga_slice = &va.data()[bi * m * k..(bi + 1) * m * k];
                    let gs = &g[bi * m * n..(bi + 1) * m * n];
                    if trans_b {
                        gemm(n, m, k, gs, true, ga_slice, false, &mut gb[bo..bo + k * n]);
                    } else {
                        gemm(k, m, n, ga_slice, true, gs, false, &mut gb[bo..bo + k * n]);
                    }
                }
            }
        }
        Op::Permute(a, axes) => {
            let a = *a;
            let in_shape = nodes[a].value.shape();
            let in_strides = strides(in_shape);
            let src: Vec<usize> = axes.iter().map(|&ax| in_strides[ax]).collect();
            let zero = vec![0; axes.len()];
            if let Some(ga) = accumulate(grads, nodes, a) {
                for_each_broadcast(out.shape(), &src, &zero, |o, ia, _| ga[ia] += g[o]);
            }
        }
        &Op::Narrow { a, axis, start } => {
            let shape = nodes[a].value.shape().to_vec();
            let len = out.shape()[axis];
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            if let Some(ga) = accumulate(grads, nodes, a) {
                for o in 0..outer {
                    let src = (o * shape[axis] + start) * inner;
                    let dst = o * len * inner;
                    for i in 0..len * inner {
                        ga[src + i] += g[dst + i];
                    }
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let axis = *axis;
            let outer: usize = out.shape()[..axis].iter().product();
            let inner: usize = out.shape()[axis + 1..].iter().product();
            let total = out.shape()[axis];
            let mut offset = 0;
            for &inp in inputs {
                let len = nodes[inp].value.shape()[axis];
                if let Some(gi) = accumulate(grads, nodes, inp) {
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * len * inner;
                        for i in 0..len * inner {
                            gi[dst + i] += g[src + i];
                        }
                    }
                }
                offset += len;
            }
        }
        &Op::Softmax { a, axis } => {
            let (outer, len, inner) = split_axis(out.shape(), axis);
            let y = out.data();
            if let Some(ga) = accumulate(grads, nodes, a) {
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: f64 = (0..len).map(|l| g[base + l * inner] * y[base + l * inner]).sum();
                        for l in 0..len {
                            let p = base + l * inner;
                            ga[p] += y[p] * (g[p] - dot);
                        }
                    }
                }
            }
        }
        Op::Norm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
            layout,
        } => {
            let (x, gamma, beta) = (*x, *gamma, *beta);
            let gv = nodes[gamma].value.data();
            let groups = NormGroups::of(nodes[x].value.shape(), *layout);
            if let Some(gg) = accumulate(grads, nodes, gamma) {
                groups.for_each(|ch, p| gg[ch] += g[p] * xhat[p]);
            }
            if let Some(gb) = accumulate(grads, nodes, beta) {
                groups.for_each(|ch, p| gb[ch] += g[p]);
            }
            if let Some(gx) = accumulate(grads, nodes, x) {
                let count = groups.count as f64;
                let mut sum_d = vec![0.0; groups.groups];
                let mut sum_dx = vec![0.0; groups.groups];
                groups.for_each_group(|grp, ch, p| {
                    let d = g[p] * gv[ch];
                    sum_d[grp] += d;
                    sum_dx[grp] += d * xhat[p];
                });
                groups.for_each_group(|grp, ch, p| {
                    let d = g[p] * gv[ch];
                    gx[p] += rstd[grp] * (d - sum_d[grp] / count - xhat[p] * sum_dx[grp] / count);
                });
            }
        }
        &Op::Sum(a) => {
            if let Some(ga) = accumulate(grads, nodes, a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        &Op::Mean(a) => {
            if let Some(ga) = accumulate(grads, nodes, a) {
                let s = g[0] / ga.len() as f64;
                ga.iter_mut().for_each(|x| *x += s);
            }
        }
        &Op::SumAxis { a, axis } => {
            let (outer, len, inner) = split_axis(nodes[a].value.shape(), axis);
            if let Some(ga) = accumulate(grads, nodes, a) {
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            ga[(o * len + l) * inner + i] += g[o * inner + i];
                        }
                    }
                }
            }
        }
        Op::Take { a, idx } => {
            if let Some(ga) = accumulate(grads, nodes, *a) {
                for (k, &i) in idx.iter().enumerate() {
                    ga[i] += g[k];
                }
            }
        }
        &Op::Conv2d { x, w, b, stride, pad } => {
            let geo = ConvGeom::of(nodes[x].value.shape(), nodes[w].value.shape(), stride, pad)?;
            let xv = nodes[x].value.data();
            let wv = nodes[w].value.data();
            let (ckk, hw) = (geo.ci * geo.kh * geo.kw, geo.ho * geo.wo);
            let need_x = nodes[x].requires_grad;
            let need_w = nodes[w].requires_grad;
            let mut cols = vec![0.0; ckk * hw];
            let mut dcols = vec![0.0; ckk * hw];
            let mut dw = vec![0.0; geo.co * ckk];
            let mut dx = if need_x {
                vec![0.0; xv.len()]
            } else {
                Vec::new()
            };
            for s in 0..geo.n {
                let gs = &g[s * geo.co * hw..(s + 1) * geo.co * hw];
                if need_w {
                    geo.im2col(&xv[s * geo.in_size()..(s + 1) * geo.in_size()], &mut cols);
                    gemm(geo.co, hw, ckk, gs, false, &cols, true, &mut dw);
                }
                if need_x {
                    dcols.iter_mut().for_each(|v| *v = 0.0);
                    gemm(ckk, geo.co, hw, wv, true, gs, false, &mut dcols);
                    geo.col2im(&dcols, &mut dx[s * geo.in_size()..(s + 1) * geo.in_size()]);
                }
            }
            if let Some(gx) = accumulate(grads, nodes, x) {
                gx.iter_mut().zip(&dx).for_each(|(a, d)| *a += d);
            }
            if let Some(gw) = accumulate(grads, nodes, w) {
                gw.iter_mut().zip(&dw).for_each(|(a, d)| *a += d);
            }
            if let Some(b) = b {
                if let Some(gb) = accumulate(grads, nodes, b) {
                    for s in 0..geo.n {
                        for c in 0..geo.co {
                            let base = (s * geo.co + c) * hw;
                            gb[c] += g[base..base + hw].iter().sum::<f64>();
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

fn reduce_broadcast(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    input: usize,
    out_shape: &[usize],
    g: &[f64],
    f: impl Fn(usize, usize, f64) -> f64,
) {
    let shape = nodes[input].value.shape().to_vec();
    if let Some(gi) = accumulate(grads, nodes, input) {
        if shape == out_shape {
            for (i, gv) in g.iter().enumerate() {
                gi[i] += f(i, i, *gv);
            }
        } else {
            let si = broadcast_strides(&shape, out_shape);
            let zero = vec![0; out_shape.len()];
            for_each_broadcast(out_shape, &si, &zero, |o, ii, _| gi[ii] += f(o, ii, g[o]));
        }
    }
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `c += op(a) * op(b)` with `op(a)` logically `m x k` and `op(b)` logically `k x n`.
/// A transposed operand is stored with its two extents swapped.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slice length checks above cover every element touched by
    // the strides for an m x k, k x n and m x n problem.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct MatGeom {
    batches: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_b: bool,
    out_shape: Vec<usize>,
}

impl MatGeom {
    fn of(a: &[usize], b: &[usize], trans_b: bool) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return dim_err(format!("matmul needs matrices, got {:?} and {:?}", a, b));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (bk, n) = if trans_b {
            (b[b.len() - 1], b[b.len() - 2])
        } else {
            (b[b.len() - 2], b[b.len() - 1])
        };
        if k != bk {
            return dim_err(format!("matmul inner extents differ: {:?} x {:?}", a, b));
        }
        let lead = &a[..a.len() - 2];
        let mut out_shape = lead.to_vec();
        out_shape.extend([m, n]);
        if b.len() == 2 {
            let rows: usize = lead.iter().product::<usize>() * m;
            Ok(Self {
                batches: 1,
                m: rows,
                k,
                n,
                shared_b: true,
                out_shape,
            })
        } else {
            if b[..b.len() - 2] != *lead {
                return dim_err(format!("matmul batch extents differ: {:?} x {:?}", a, b));
            }
            Ok(Self {
                batches: lead.iter().product(),
                m,
                k,
                n,
                shared_b: false,
                out_shape,
            })
        }
    }
}

struct NormGroups {
    shape: Vec<usize>,
    layout: NormLayout,
    groups: usize,
    count: usize,
}

impl NormGroups {
    fn of(shape: &[usize], layout: NormLayout) -> Self {
        let (groups, count) = match layout {
            NormLayout::LastAxis => {
                let c = *shape.last().unwrap_or(&1);
                (shape.iter().product::<usize>() / c.max(1), c)
            }
            NormLayout::Channel => (shape[1], shape[0] * shape[2..].iter().product::<usize>()),
        };
        Self {
            shape: shape.to_vec(),
            layout,
            groups,
            count,
        }
    }

    /// Calls `f(group, channel, flat position)` for every element.
    fn for_each_group(&self, mut f: impl FnMut(usize, usize, usize)) {
        match self.layout {
            NormLayout::LastAxis => {
                let c = self.count;
                for grp in 0..self.groups {
                    for ch in 0..c {
                        f(grp, ch, grp * c + ch);
                    }
                }
            }
            NormLayout::Channel => {
                let (n, c) = (self.shape[0], self.shape[1]);
                let hw: usize = self.shape[2..].iter().product();
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        for p in 0..hw {
                            f(ch, ch, base + p);
                        }
                    }
                }
            }
        }
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        self.for_each_group(|_, ch, p| f(ch, p));
    }
}

struct ConvGeom {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn of(x: &[usize], k: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || k.len() != 4 {
            return dim_err(format!("conv2d expects 4-d input and kernel, got {:?} and {:?}", x, k));
        }
        if x[1] != k[1] {
            return dim_err(format!("conv2d channel mismatch: input {:?}, kernel {:?}", x, k));
        }
        if stride == 0 {
            return dim_err("conv2d stride must be positive");
        }
        let (h, w) = (x[2] + 2 * pad, x[3] + 2 * pad);
        if k[2] > h || k[3] > w {
            return dim_err(format!("kernel {:?} larger than padded input {}x{}", k, h, w));
        }
        Ok(Self {
            n: x[0],
            ci: x[1],
            h: x[2],
            w: x[3],
            co: k[0],
            kh: k[2],
            kw: k[3],
            stride,
            pad,
            ho: (h - k[2]) / stride + 1,
            wo: (w - k[3]) / stride + 1,
        })
    }

    fn in_size(&self) -> usize {
        self.ci * self.h * self.w
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let hw = self.ho * self.wo;
        for c in 0..self.ci {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((c * self.kh + ki) * self.kw + kj) * hw;
                    for oh in 0..self.ho {
                        let ih = (oh * self.stride + ki) as isize - self.pad as isize;
                        for ow in 0..self.wo {
                            let iw = (ow * self.stride + kj) as isize - self.pad as isize;
                            cols[row + oh * self.wo + ow] = if ih >= 0
                                && iw >= 0
                                && (ih as usize) < self.h
                                && (iw as usize) < self.w
                            {
                                x[(c * self.h + ih as usize) * self.w + iw as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let hw = self.ho * self.wo;
        for c in 0..self.ci {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((c * self.kh + ki) * self.kw + kj) * hw;
                    for oh in 0..self.ho {
                        let ih = (oh * self.stride + ki) as isize - self.pad as isize;
                        if ih < 0 || ih as usize >= self.h {
                            continue;
                        }
                        for ow in 0..self.wo {
                            let iw = (ow * self.stride + kj) as isize - self.pad as isize;
                            if iw < 0 || iw as usize >= self.w {
                                continue;
                            }
                            dx[(c * self.h + ih as usize) * self.w + iw as usize] += cols[row + oh * self.wo + ow];
                        }
                    }
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value(self.id).shape().to_vec()
    }

    /// Copy of the recorded value.
    pub fn value(&self) -> Tensor {
        self.tape.value(self.id).clone()
    }

    pub fn item(&self) -> f64 {
        self.tape.value(self.id).data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Dimension("vars recorded on different tapes".into()))
        }
    }

    fn binary(&self, other: Var<'t>, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let out = {
            let a = self.tape.value(self.id);
            let b = self.tape.value(other.id);
            if a.shape() == b.shape() {
                let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
                Tensor::new(a.shape(), data)?
            } else {
                let shape = broadcast_shape(a.shape(), b.shape())?;
                let sa = broadcast_strides(a.shape(), &shape);
                let sb = broadcast_strides(b.shape(), &shape);
                let mut data = vec![0.0; shape.iter().product()];
                for_each_broadcast(&shape, &sa, &sb, |o, ia, ib| data[o] = f(a.data()[ia], b.data()[ib]));
                Tensor::new(&shape, data)?
            }
        };
        self.tape.push(out, op, &[self.id, other.id], what)
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    pub fn maximum(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "maximum", |a, b| if a >= b { a } else { b }, Op::Maximum(self.id, other.id))
    }

    pub fn minimum(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "minimum", |a, b| if a <= b { a } else { b }, Op::Minimum(self.id, other.id))
    }

    pub fn scale(&self, s: f64) -> Result<Var<'t>> {
        let out = self.map(|x| x * s);
        self.tape.push(out, Op::Scale(self.id, s), &[self.id], "scale")
    }

    pub fn neg(&self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'t>> {
        let out = self.map(|x| x + c);
        self.tape.push(out, Op::Shift(self.id), &[self.id], "add_scalar")
    }

    /// `c - self`
    pub fn rsub_scalar(&self, c: f64) -> Result<Var<'t>> {
        self.neg()?.add_scalar(c)
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.tape.value(self.id);
        Tensor::new(v.shape(), v.data().iter().map(|x| f(*x)).collect()).expect("same shape")
    }

    fn unary(&self, kind: Unary, what: &str, f: impl Fn(f64) -> f64) -> Result<Var<'t>> {
        let out = self.map(f);
        self.tape.push(out, Op::Unary(self.id, kind), &[self.id], what)
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        self.unary(Unary::Relu, "relu", |x| x.max(0.0))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&self) -> Result<Var<'t>> {
        const C: f64 = 0.797_884_560_802_865_4;
        self.unary(Unary::Gelu, "gelu", |x| 0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh()))
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        self.unary(Unary::Sigmoid, "sigmoid", sigmoid)
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.unary(Unary::Exp, "exp", f64::exp)
    }

    pub fn ln(&self) -> Result<Var<'t>> {
        self.unary(Unary::Ln, "ln", f64::ln)
    }

    pub fn abs(&self) -> Result<Var<'t>> {
        self.unary(Unary::Abs, "abs", f64::abs)
    }

    pub fn sqrt(&self) -> Result<Var<'t>> {
        self.unary(Unary::Sqrt, "sqrt", f64::sqrt)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Var<'t>> {
        self.unary(Unary::Clamp(lo, hi), "clamp", move |x| x.clamp(lo, hi))
    }

    pub fn square(&self) -> Result<Var<'t>> {
        self.mul(*self)
    }

    fn matmul_impl(&self, other: Var<'t>, trans_b: bool) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let out = {
            let a = self.tape.value(self.id);
            let b = self.tape.value(other.id);
            let geo = MatGeom::of(a.shape(), b.shape(), trans_b)?;
            let (m, k, n) = (geo.m, geo.k, geo.n);
            let mut c = vec![0.0; geo.batches * m * n];
            for bi in 0..geo.batches {
                let bo = if geo.shared_b { 0 } else { bi * k * n };
                gemm(
                    m,
                    k,
                    n,
                    &a.data()[bi * m * k..(bi + 1) * m * k],
                    false,
                    &b.data()[bo..bo + k * n],
                    trans_b,
                    &mut c[bi * m * n..(bi + 1) * m * n],
                );
            }
            Tensor::new(&geo.out_shape, c)?
        };
        self.tape.push(
            out,
            Op::MatMul {
                a: self.id,
                b: other.id,
                trans_b,
            },
            &[self.id, other.id],
            "matmul",
        )
    }

    /// Matrix product. `self` is `[.., M, K]`; `other` is either a shared
    /// `[K, N]` matrix or a batch `[.., K, N]` with the same leading extents.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, false)
    }

    /// `self * other^T` over the last two axes.
    pub fn matmul_t(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, true)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        self.tape.push(out, Op::Reshape(self.id), &[self.id], "reshape")
    }

    pub fn flatten(&self) -> Result<Var<'t>> {
        let n = self.tape.value(self.id).numel();
        self.reshape(&[n])
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var<'t>> {
        let out = {
            let v = self.tape.value(self.id);
            let nd = v.ndim();
            let mut seen = vec![false; nd];
            if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
                return dim_err(format!("invalid permutation {:?} for shape {:?}", axes, v.shape()));
            }
            let shape: Vec<usize> = axes.iter().map(|&a| v.shape()[a]).collect();
            let st = strides(v.shape());
            let src: Vec<usize> = axes.iter().map(|&a| st[a]).collect();
            let zero = vec![0; nd];
            let mut data = vec![0.0; v.numel()];
            for_each_broadcast(&shape, &src, &zero, |o, i, _| data[o] = v.data()[i]);
            Tensor::new(&shape, data)?
        };
        self.tape.push(out, Op::Permute(self.id, axes.to_vec()), &[self.id], "permute")
    }

    /// Slice `len` entries along `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let out = {
            let v = self.tape.value(self.id);
            let shape = v.shape();
            if axis >= shape.len() || start + len > shape[axis] {
                return dim_err(format!("narrow({axis}, {start}, {len}) out of range for {:?}", shape));
            }
            let (outer, full, inner) = split_axis(shape, axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let s = (o * full + start) * inner;
                data.extend_from_slice(&v.data()[s..s + len * inner]);
            }
            let mut out_shape = shape.to_vec();
            out_shape[axis] = len;
            Tensor::new(&out_shape, data)?
        };
        self.tape.push(
            out,
            Op::Narrow {
                a: self.id,
                axis,
                start,
            },
            &[self.id],
            "narrow",
        )
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let Some(first) = parts.first() else {
            return dim_err("concat of nothing");
        };
        let tape = first.tape;
        for p in parts {
            first.same_tape(p)?;
        }
        let out = {
            let values: Vec<Ref<'_, Tensor>> = parts.iter().map(|p| tape.value(p.id)).collect();
            let base = values[0].shape().to_vec();
            if axis >= base.len() {
                return dim_err("concat axis out of range");
            }
            let mut total = 0;
            for v in &values {
                let s = v.shape();
                if s.len() != base.len() || (0..s.len()).any(|d| d != axis && s[d] != base[d]) {
                    return dim_err(format!("concat shape mismatch {:?} vs {:?}", s, base));
                }
                total += s[axis];
            }
            let outer: usize = base[..axis].iter().product();
            let inner: usize = base[axis + 1..].iter().product();
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for v in &values {
                    let len = v.shape()[axis] * inner;
                    data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
                }
            }
            let mut shape = base;
            shape[axis] = total;
            Tensor::new(&shape, data)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        tape.push(out, Op::Concat { inputs: ids.clone(), axis }, &ids, "concat")
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let out = {
            let v = self.tape.value(self.id);
            if axis >= v.ndim() {
                return dim_err(format!("softmax axis {axis} out of range for {:?}", v.shape()));
            }
            Tensor::new(v.shape(), softmax_values(v.data(), v.shape(), axis))?
        };
        self.tape.push(out, Op::Softmax { a: self.id, axis }, &[self.id], "softmax")
    }

    fn normalize(&self, gamma: Var<'t>, beta: Var<'t>, eps: f64, layout: NormLayout) -> Result<(Var<'t>, Vec<f64>, Vec<f64>)> {
        self.same_tape(&gamma)?;
        self.same_tape(&beta)?;
        let (out, xhat, rstd, mean, var) = {
            let x = self.tape.value(self.id);
            let g = self.tape.value(gamma.id);
            let b = self.tape.value(beta.id);
            let channels = match layout {
                NormLayout::LastAxis => *x.shape().last().unwrap_or(&0),
                NormLayout::Channel => {
                    if x.ndim() != 4 {
                        return dim_err(format!("batch norm expects [N,C,H,W], got {:?}", x.shape()));
                    }
                    x.shape()[1]
                }
            };
            if g.numel() != channels || b.numel() != channels {
                return dim_err(format!("norm affine needs {channels} entries"));
            }
            let groups = NormGroups::of(x.shape(), layout);
            let count = groups.count as f64;
            let mut mean = vec![0.0; groups.groups];
            groups.for_each_group(|grp, _, p| mean[grp] += x.data()[p]);
            mean.iter_mut().for_each(|m| *m /= count);
            let mut var = vec![0.0; groups.groups];
            groups.for_each_group(|grp, _, p| var[grp] += (x.data()[p] - mean[grp]).powi(2));
            var.iter_mut().for_each(|v| *v /= count);
            let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let mut xhat = vec![0.0; x.numel()];
            let mut y = vec![0.0; x.numel()];
            groups.for_each_group(|grp, ch, p| {
                xhat[p] = (x.data()[p] - mean[grp]) * rstd[grp];
                y[p] = xhat[p] * g.data()[ch] + b.data()[ch];
            });
            (Tensor::new(x.shape(), y)?, xhat, rstd, mean, var)
        };
        let v = self.tape.push(
            out,
            Op::Norm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
                layout,
            },
            &[self.id, gamma.id, beta.id],
            "normalize",
        )?;
        Ok((v, mean, var))
    }

    /// Normalization over the last axis with a learnable affine.
    pub fn layer_norm(&self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        Ok(self.normalize(gamma, beta, eps, NormLayout::LastAxis)?.0)
    }

    /// Per-channel normalization of `[N, C, H, W]` with batch statistics.
    /// Also returns the (biased) batch mean and variance per channel.
    pub fn batch_norm(&self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<(Var<'t>, Vec<f64>, Vec<f64>)> {
        self.normalize(gamma, beta, eps, NormLayout::Channel)
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        let s: f64 = self.tape.value(self.id).data().iter().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id), &[self.id], "sum")
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let m = {
            let v = self.tape.value(self.id);
            if v.numel() == 0 {
                return dim_err("mean of empty tensor");
            }
            v.data().iter().sum::<f64>() / v.numel() as f64
        };
        self.tape.push(Tensor::scalar(m), Op::Mean(self.id), &[self.id], "mean")
    }

    /// Sum over `axis`, dropping it.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        let out = {
            let v = self.tape.value(self.id);
            if axis >= v.ndim() {
                return dim_err("sum_axis out of range");
            }
            let (outer, len, inner) = split_axis(v.shape(), axis);
            let mut data = vec![0.0; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        data[o * inner + i] += v.data()[(o * len + l) * inner + i];
                    }
                }
            }
            let mut shape = v.shape().to_vec();
            shape.remove(axis);
            Tensor::new(&shape, data)?
        };
        self.tape.push(out, Op::SumAxis { a: self.id, axis }, &[self.id], "sum_axis")
    }

    /// Gather flat positions into a 1-d tensor.
    pub fn take(&self, idx: &[usize]) -> Result<Var<'t>> {
        let out = {
            let v = self.tape.value(self.id);
            if let Some(&bad) = idx.iter().find(|&&i| i >= v.numel()) {
                return dim_err(format!("take index {bad} out of range {}", v.numel()));
            }
            Tensor::new(&[idx.len()], idx.iter().map(|&i| v.data()[i]).collect())?
        };
        self.tape.push(
            out,
            Op::Take {
                a: self.id,
                idx: idx.to_vec(),
            },
            &[self.id],
            "take",
        )
    }

    /// Cross-correlation of `[N, Ci, H, W]` with `[Co, Ci, kh, kw]`, optional bias `[Co]`.
    pub fn conv2d(&self, kernel: Var<'t>, bias: Option<Var<'t>>, stride: usize, pad: usize) -> Result<Var<'t>> {
        self.same_tape(&kernel)?;
        let out = {
            let x = self.tape.value(self.id);
            let w = self.tape.value(kernel.id);
            let geo = ConvGeom::of(x.shape(), w.shape(), stride, pad)?;
            let bias_v = match bias {
                Some(b) => {
                    self.same_tape(&b)?;
                    let bv = self.tape.value(b.id);
                    if bv.numel() != geo.co {
                        return dim_err("conv2d bias length must equal output channels");
                    }
                    Some(bv.data().to_vec())
                }
                None => None,
            };
            let (ckk, hw) = (geo.ci * geo.kh * geo.kw, geo.ho * geo.wo);
            let mut cols = vec![0.0; ckk * hw];
            let mut y = vec![0.0; geo.n * geo.co * hw];
            for s in 0..geo.n {
                geo.im2col(&x.data()[s * geo.in_size()..(s + 1) * geo.in_size()], &mut cols);
                let ys = &mut y[s * geo.co * hw..(s + 1) * geo.co * hw];
                if let Some(bv) = &bias_v {
                    for c in 0..geo.co {
                        ys[c * hw..(c + 1) * hw].iter_mut().for_each(|v| *v = bv[c]);
                    }
                }
                gemm(geo.co, ckk, hw, w.data(), false, &cols, false, ys);
            }
            Tensor::new(&[geo.n, geo.co, geo.ho, geo.wo], y)?
        };
        let mut inputs = vec![self.id, kernel.id];
        if let Some(b) = bias {
            inputs.push(b.id);
        }
        self.tape.push(
            out,
            Op::Conv2d {
                x: self.id,
                w: kernel.id,
                b: bias.map(|b| b.id),
                stride,
                pad,
            },
            &inputs,
            "conv2d",
        )
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted softmax on raw values along `axis` of `shape`.
pub fn softmax_values(data: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let max = (0..len).map(|l| data[base + l * inner]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for l in 0..len {
                let e = (data[base + l * inner] - max).exp();
                out[base + l * inner] = e;
                total += e;
            }
            for l in 0..len {
                out[base + l * inner] /= total;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let tape = Tape::new();
        let eye = tape.constant(Tensor::eye(2)).unwrap();
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(eye.matmul(m).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.constant(t(&[1, 2], &[1.0, 2.0])).unwrap();
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0])).unwrap();
        assert_eq!(a.matmul(b).unwrap().value().data(), &[11.0]);

        let z = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(m.matmul(z).unwrap().value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(a.matmul(b), Err(Error::Dimension(_))));
    }

    #[test]
    fn batched_and_transposed_matmul_agree_with_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[2, 5, 4], 1.0, &mut rng);
        let tape = Tape::new();
        let va = tape.constant(a.clone()).unwrap();
        let vb = tape.constant(b.clone()).unwrap();
        let c = va.matmul_t(vb).unwrap().value();
        assert_eq!(c.shape(), &[2, 3, 5]);
        for bi in 0..2 {
            for i in 0..3 {
                for j in 0..5 {
                    let want: f64 = (0..4).map(|k| a.get(&[bi, i, k]) * b.get(&[bi, j, k])).sum();
                    assert!((c.get(&[bi, i, j]) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0])).unwrap();
        for v in x.softmax(0).unwrap().value().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(t(&[2], &[1000.0, 1000.0])).unwrap();
        assert_eq!(x.softmax(0).unwrap().value().data(), &[0.5, 0.5]);
        let x = tape.constant(t(&[2], &[0.0, 3f64.ln()])).unwrap();
        let y = x.softmax(0).unwrap().value();
        assert!((y.data()[0] - 0.25).abs() < 1e-15);
        assert!((y.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_respects_axis() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[0.0, 1.0, 2.0, 3.0])).unwrap();
        let y = x.softmax(0).unwrap().value();
        assert!((y.get(&[0, 0]) + y.get(&[1, 0]) - 1.0).abs() < 1e-15);
        assert!((y.get(&[0, 0]) - y.get(&[0, 1])).abs() < 1e-15);
    }

    #[test]
    fn conv_identity_and_counting() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[1, 1, 4, 4], 1.0, &mut rng);
        let vx = tape.constant(x.clone()).unwrap();
        let k = tape.constant(Tensor::ones(&[1, 1, 1, 1])).unwrap();
        assert_eq!(vx.conv2d(k, None, 1, 0).unwrap().value(), x);

        let ones = tape.constant(Tensor::ones(&[1, 1, 3, 3])).unwrap();
        let k3 = tape.constant(Tensor::ones(&[1, 1, 3, 3])).unwrap();
        let y = ones.conv2d(k3, None, 1, 0).unwrap().value();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn conv_kernel_larger_than_input_fails() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 2, 2])).unwrap();
        let k = tape.constant(Tensor::ones(&[1, 1, 3, 3])).unwrap();
        assert!(matches!(x.conv2d(k, None, 1, 0), Err(Error::Dimension(_))));
        assert!(x.conv2d(k, None, 1, 1).is_ok());
    }

    #[test]
    fn ln_of_zero_is_an_error() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2])).unwrap();
        assert!(matches!(x.ln(), Err(Error::NonFinite(_))));
    }

    #[test]
    fn gradient_of_shared_parameter_accumulates() {
        let tape = Tape::new();
        let w = t(&[2], &[1.5, -2.0]);
        let a = tape.param("w", &w).unwrap();
        let b = tape.param("w", &w).unwrap();
        let loss = a.mul(b).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        // d/dw sum(w*w) = 2w, split across the two bindings
        assert_eq!(g.get("w").unwrap().data(), &[3.0, -4.0]);
    }

    #[test]
    fn constants_get_no_gradient_entries() {
        let tape = Tape::new();
        let c = tape.constant(t(&[2], &[1.0, 2.0])).unwrap();
        let p = tape.param("p", &t(&[2], &[3.0, 4.0])).unwrap();
        let loss = c.mul(p).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get("p").unwrap().data(), &[1.0, 2.0]);
        assert!(g.wrt(c).is_none());
    }
}
