//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! A [`Tape`] records one forward pass; every operation pushes a node that
//! owns its result plus a closure that routes an incoming cotangent to the
//! operation's inputs. Tapes are rebuilt for every forward pass, nothing is
//! cached between passes. [`Var`] is a cheap handle (tape pointer + node
//! index); cloning it does not copy data.
//!
//! All differentiable primitives live here as `Var` methods returning
//! `Result`, so shape errors surface at the call site that built the bad
//! expression. Composite operations (softmax, layer_norm, affine) are
//! assembled from primitives and inherit exact gradients.

use std::cell::RefCell;
use std::rc::Rc;

use crate::array::{self, max_axis_keep, sum_to, Array};
use crate::error::{Error, Result};

type BackFn = Box<dyn Fn(&Array, &mut GradBuf)>;

struct Node {
    value: Array,
    requires_grad: bool,
    back: Option<BackFn>,
}

struct TapeInner {
    nodes: RefCell<Vec<Node>>,
}

/// Gradient accumulator indexed by tape position.
pub(crate) struct GradBuf<'a> {
    slots: &'a mut Vec<Option<Array>>,
}

impl GradBuf<'_> {
    fn add(&mut self, idx: usize, g: Array) {
        match &mut self.slots[idx] {
            Some(acc) => {
                *acc = array::add(acc, &g).expect("gradient shape drift");
            }
            slot @ None => *slot = Some(g),
        }
    }
}

/// One recording of a forward computation.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<TapeInner>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { inner: Rc::new(TapeInner { nodes: RefCell::new(Vec::new()) }) }
    }

    /// Leaf that participates in differentiation.
    pub fn var(&self, value: Array) -> Var {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant; no gradient is ever produced for it.
    pub fn constant(&self, value: Array) -> Var {
        self.leaf(value, false)
    }

    /// Leaf whose grad participation follows the array's own flag.
    pub fn leaf_from(&self, value: Array) -> Var {
        let rg = value.requires_grad();
        self.leaf(value, rg)
    }

    fn leaf(&self, value: Array, requires_grad: bool) -> Var {
        self.push(Node { value, requires_grad, back: None })
    }

    pub fn len(&self) -> usize {
        self.inner.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> Var {
        let mut nodes = self.inner.nodes.borrow_mut();
        nodes.push(node);
        Var { tape: Rc::clone(&self.inner), idx: nodes.len() - 1 }
    }
}

/// Handle to a tape node.
#[derive(Clone)]
pub struct Var {
    tape: Rc<TapeInner>,
    idx: usize,
}

/// Gradients of one scalar root with respect to every tape node.
pub struct Grads {
    slots: Vec<Option<Array>>,
}

impl Grads {
    /// Gradient for `v`, or `None` if the root does not depend on it.
    pub fn get(&self, v: &Var) -> Option<&Array> {
        self.slots.get(v.idx).and_then(|s| s.as_ref())
    }

    /// Gradient for `v`, zero-filled when the root does not depend on it.
    pub fn wrt(&self, v: &Var) -> Array {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Array::zeros(&v.value().shape().to_vec()),
        }
    }
}

impl Var {
    /// Snapshot of this node's value (cheap, shares the buffer).
    pub fn value(&self) -> Array {
        self.tape.nodes.borrow()[self.idx].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.idx].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.idx].requires_grad
    }

    /// Tape handle, for lifting constants into the same recording.
    pub fn tape(&self) -> Tape {
        Tape { inner: Rc::clone(&self.tape) }
    }

    fn same_tape(&self, other: &Var) -> Result<()> {
        if !Rc::ptr_eq(&self.tape, &other.tape) {
            return Err(Error::op("tape", "operands recorded on different tapes"));
        }
        Ok(())
    }

    fn push(&self, value: Array, requires_grad: bool, back: Option<BackFn>) -> Var {
        let mut nodes = self.tape.nodes.borrow_mut();
        nodes.push(Node { value, requires_grad, back: if requires_grad { back } else { None } });
        Var { tape: Rc::clone(&self.tape), idx: nodes.len() - 1 }
    }

    /// Runs reverse accumulation from this scalar node.
    pub fn backward(&self) -> Result<Grads> {
        let nodes = self.tape.nodes.borrow();
        let root = &nodes[self.idx];
        if root.value.len() != 1 {
            return Err(Error::op(
                "backward",
                format!("root must be scalar, got shape {:?}", root.value.shape()),
            ));
        }
        let mut slots: Vec<Option<Array>> = Vec::with_capacity(nodes.len());
        slots.resize_with(nodes.len(), || None);
        slots[self.idx] = Some(Array::ones(root.value.shape()));
        for i in (0..=self.idx).rev() {
            let Some(g) = slots[i].clone() else { continue };
            if let Some(back) = &nodes[i].back {
                back(&g, &mut GradBuf { slots: &mut slots });
            }
        }
        Ok(Grads { slots })
    }

    // ---- elementwise binary ---------------------------------------------

    pub fn add(&self, rhs: &Var) -> Result<Var> {
        self.same_tape(rhs)?;
        let (a, b) = (self.value(), rhs.value());
        let out = array::add(&a, &b)?;
        let (ia, ib) = (self.idx, rhs.idx);
        let (ra, rb) = (self.requires_grad(), rhs.requires_grad());
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        Ok(self.push(
            out,
            ra || rb,
            Some(Box::new(move |g, buf| {
                if ra {
                    buf.add(ia, sum_to(g, &sa).expect("add backward"));
                }
                if rb {
                    buf.add(ib, sum_to(g, &sb).expect("add backward"));
                }
            })),
        ))
    }

    pub fn sub(&self, rhs: &Var) -> Result<Var> {
        self.same_tape(rhs)?;
        let (a, b) = (self.value(), rhs.value());
        let out = array::sub(&a, &b)?;
        let (ia, ib) = (self.idx, rhs.idx);
        let (ra, rb) = (self.requires_grad(), rhs.requires_grad());
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        Ok(self.push(
            out,
            ra || rb,
            Some(Box::new(move |g, buf| {
                if ra {
                    buf.add(ia, sum_to(g, &sa).expect("sub backward"));
                }
                if rb {
                    buf.add(ib, sum_to(&g.map(|v| -v), &sb).expect("sub backward"));
                }
            })),
        ))
    }

    pub fn mul(&self, rhs: &Var) -> Result<Var> {
        self.same_tape(rhs)?;
        let (a, b) = (self.value(), rhs.value());
        let out = array::mul(&a, &b)?;
        let (ia, ib) = (self.idx, rhs.idx);
        let (ra, rb) = (self.requires_grad(), rhs.requires_grad());
        Ok(self.push(
            out,
            ra || rb,
            Some(Box::new(move |g, buf| {
                if ra {
                    let ga = array::mul(g, &b).expect("mul backward");
                    buf.add(ia, sum_to(&ga, a.shape()).expect("mul backward"));
                }
                if rb {
                    let gb = array::mul(g, &a).expect("mul backward");
                    buf.add(ib, sum_to(&gb, b.shape()).expect("mul backward"));
                }
            })),
        ))
    }

    pub fn div(&self, rhs: &Var) -> Result<Var> {
        self.same_tape(rhs)?;
        let (a, b) = (self.value(), rhs.value());
        let out = array::div(&a, &b)?;
        let (ia, ib) = (self.idx, rhs.idx);
        let (ra, rb) = (self.requires_grad(), rhs.requires_grad());
        Ok(self.push(
            out,
            ra || rb,
            Some(Box::new(move |g, buf| {
                if ra {
                    let ga = array::div(g, &b).expect("div backward");
                    buf.add(ia, sum_to(&ga, a.shape()).expect("div backward"));
                }
                if rb {
                    let ab2 = array::div(&a, &array::mul(&b, &b).expect("div backward"))
                        .expect("div backward");
                    let gb = array::mul(g, &ab2.map(|v| -v)).expect("div backward");
                    buf.add(ib, sum_to(&gb, b.shape()).expect("div backward"));
                }
            })),
        ))
    }

    // ---- elementwise unary ----------------------------------------------

    fn unary(
        &self,
        out: Array,
        back: impl Fn(&Array) -> Array + 'static,
    ) -> Var {
        let idx = self.idx;
        let rg = self.requires_grad();
        self.push(
            out,
            rg,
            Some(Box::new(move |g, buf| {
                buf.add(idx, back(g));
            })),
        )
    }

    pub fn neg(&self) -> Var {
        let out = self.value().map(|v| -v);
        self.unary(out, |g| g.map(|v| -v))
    }

    pub fn exp(&self) -> Var {
        let y = self.value().map(f64::exp);
        let yc = y.clone();
        self.unary(y, move |g| array::mul(g, &yc).expect("exp backward"))
    }

    pub fn log(&self) -> Var {
        let x = self.value();
        let y = x.map(f64::ln);
        self.unary(y, move |g| array::div(g, &x).expect("log backward"))
    }

    pub fn sqrt(&self) -> Var {
        let y = self.value().map(f64::sqrt);
        let yc = y.clone();
        self.unary(y, move |g| {
            array::binary_op("sqrt_back", g, &yc, |gv, yv| 0.5 * gv / yv).expect("sqrt backward")
        })
    }

    pub fn tanh(&self) -> Var {
        let y = self.value().map(f64::tanh);
        let yc = y.clone();
        self.unary(y, move |g| {
            array::binary_op("tanh_back", g, &yc, |gv, yv| gv * (1.0 - yv * yv))
                .expect("tanh backward")
        })
    }

    pub fn relu(&self) -> Var {
        let x = self.value();
        let y = x.map(|v| v.max(0.0));
        self.unary(y, move |g| {
            array::binary_op("relu_back", g, &x, |gv, xv| if xv > 0.0 { gv } else { 0.0 })
                .expect("relu backward")
        })
    }

    /// Absolute value; the subgradient at 0 is +1, matching the crate's
    /// sign convention.
    pub fn abs(&self) -> Var {
        let x = self.value();
        let y = x.map(f64::abs);
        self.unary(y, move |g| {
            array::binary_op("abs_back", g, &x, |gv, xv| if xv >= 0.0 { gv } else { -gv })
                .expect("abs backward")
        })
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        let out = self.value().map(|v| v + c);
        self.unary(out, |g| g.clone())
    }

    pub fn mul_scalar(&self, c: f64) -> Var {
        let out = self.value().map(|v| v * c);
        self.unary(out, move |g| g.map(|v| v * c))
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&self, rhs: &Var) -> Result<Var> {
        self.same_tape(rhs)?;
        let (a, b) = (self.value(), rhs.value());
        let out = array::matmul(&a, &b)?;
        let (ia, ib) = (self.idx, rhs.idx);
        let (ra, rb) = (self.requires_grad(), rhs.requires_grad());
        Ok(self.push(
            out,
            ra || rb,
            Some(Box::new(move |g, buf| {
                if ra {
                    let bt = array::transpose_last(&b).expect("matmul backward");
                    let ga = array::matmul(g, &bt).expect("matmul backward");
                    buf.add(ia, sum_to(&ga, a.shape()).expect("matmul backward"));
                }
                if rb {
                    let at = array::transpose_last(&a).expect("matmul backward");
                    let gb = array::matmul(&at, g).expect("matmul backward");
                    buf.add(ib, sum_to(&gb, b.shape()).expect("matmul backward"));
                }
            })),
        ))
    }

    pub fn transpose(&self, ax0: usize, ax1: usize) -> Result<Var> {
        let out = array::transpose(&self.value(), ax0, ax1)?;
        let idx = self.idx;
        let rg = self.requires_grad();
        Ok(self.push(
            out,
            rg,
            Some(Box::new(move |g, buf| {
                buf.add(idx, array::transpose(g, ax0, ax1).expect("transpose backward"));
            })),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let src_shape = self.shape();
        let out = self.value().reshape(shape)?;
        let idx = self.idx;
        let rg = self.requires_grad();
        Ok(self.push(
            out,
            rg,
            Some(Box::new(move |g, buf| {
                buf.add(idx, g.reshape(&src_shape).expect("reshape backward"));
            })),
        ))
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum_axis(&self, axis: usize, keepdims: bool) -> Result<Var> {
        let x = self.value();
        let out = array::sum_axis(&x, axis, keepdims)?;
        let idx = self.idx;
        let rg = self.requires_grad();
        let in_shape = x.shape().to_vec();
        let mut keep_shape = in_shape.clone();
        keep_shape[axis] = 1;
        Ok(self.push(
            out,
            rg,
            Some(Box::new(move |g, buf| {
                let gk = g.reshape(&keep_shape).expect("sum_axis backward");
                let expanded =
                    array::binary_op("expand", &Array::zeros(&in_shape), &gk, |_, y| y)
                        .expect("sum_axis backward");
                buf.add(idx, expanded);
            })),
        ))
    }

    pub fn mean_axis(&self, axis: usize, keepdims: bool) -> Result<Var> {
        let n = *self
            .shape()
            .get(axis)
            .ok_or(Error::Axis { op: "mean_axis", axis, rank: self.shape().len() })?;
        Ok(self.sum_axis(axis, keepdims)?.mul_scalar(1.0 / n as f64))
    }

    pub fn sum_all(&self) -> Var {
        let x = self.value();
        let out = array::sum_all(&x);
        let idx = self.idx;
        let rg = self.requires_grad();
        let in_shape = x.shape().to_vec();
        self.push(
            out,
            rg,
            Some(Box::new(move |g, buf| {
                buf.add(idx, Array::full(&in_shape, g.item()));
            })),
        )
    }

    pub fn mean_all(&self) -> Var {
        let n = self.value().len() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    // ---- composites --------------------------------------------------------

    /// Numerically stable softmax along `axis`. The shift by the axis
    /// maximum is a constant; softmax is invariant to it, so gradients stay
    /// exact.
    pub fn softmax(&self, axis: usize) -> Result<Var> {
        let rank = self.shape().len();
        if axis >= rank {
            return Err(Error::Axis { op: "softmax", axis, rank });
        }
        if axis != rank - 1 {
            let moved = self.transpose(axis, rank - 1)?;
            return moved.softmax(rank - 1)?.transpose(axis, rank - 1);
        }
        let m = max_axis_keep(&self.value(), axis)?;
        let shifted = self.sub(&self.lift_constant(m))?;
        let e = shifted.exp();
        let denom = e.sum_axis(axis, true)?;
        e.div(&denom)
    }

    /// Layer normalization along `axis` with population variance and the
    /// given epsilon inside the square root.
    pub fn layer_norm(&self, gain: &Var, bias: &Var, axis: usize, eps: f64) -> Result<Var> {
        let rank = self.shape().len();
        if axis >= rank {
            return Err(Error::Axis { op: "layer_norm", axis, rank });
        }
        if axis != rank - 1 {
            let moved = self.transpose(axis, rank - 1)?;
            let normed = moved.layer_norm(gain, bias, rank - 1, eps)?;
            return normed.transpose(axis, rank - 1);
        }
        let mu = self.mean_axis(axis, true)?;
        let xc = self.sub(&mu)?;
        let var = xc.mul(&xc)?.mean_axis(axis, true)?;
        let denom = var.add_scalar(eps).sqrt();
        xc.div(&denom)?.mul(gain)?.add(bias)
    }

    /// `x W + b`, accepting a rank-1 `x` as a single row.
    pub fn affine(&self, w: &Var, b: &Var) -> Result<Var> {
        if self.shape().len() == 1 {
            let k = self.shape()[0];
            let row = self.reshape(&[1, k])?;
            let out = row.matmul(w)?.add(b)?;
            let n = out.shape()[1];
            return out.reshape(&[n]);
        }
        self.matmul(w)?.add(b)
    }

    /// Lifts an array onto this var's tape as a constant.
    pub fn lift_constant(&self, value: Array) -> Var {
        self.tape().constant(value)
    }
}

/// Concatenates vars along `axis`.
pub fn concat(axis: usize, parts: &[Var]) -> Result<Var> {
    if parts.is_empty() {
        return Err(Error::op("concat", "no inputs"));
    }
    for p in &parts[1..] {
        parts[0].same_tape(p)?;
    }
    let values: Vec<Array> = parts.iter().map(|p| p.value()).collect();
    let refs: Vec<&Array> = values.iter().collect();
    let out = array::concat(axis, &refs)?;
    let idxs: Vec<usize> = parts.iter().map(|p| p.idx).collect();
    let rgs: Vec<bool> = parts.iter().map(|p| p.requires_grad()).collect();
    let any_rg = rgs.iter().any(|&r| r);
    let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
    Ok(parts[0].push(
        out,
        any_rg,
        Some(Box::new(move |g, buf| {
            // Walk the concatenated axis and copy each input's slab back out.
            let outer: usize = shapes[0][..axis].iter().product();
            let inner: usize = shapes[0][axis + 1..].iter().product();
            let total_mid: usize = shapes.iter().map(|s| s[axis]).sum();
            let gd = g.data();
            let mut mid_off = 0usize;
            for (p, shape) in shapes.iter().enumerate() {
                let mid = shape[axis];
                if rgs[p] {
                    let mut part = Vec::with_capacity(outer * mid * inner);
                    for o in 0..outer {
                        let base = (o * total_mid + mid_off) * inner;
                        part.extend_from_slice(&gd[base..base + mid * inner]);
                    }
                    buf.add(idxs[p], Array::from_vec(shape.clone(), part).expect("concat backward"));
                }
                mid_off += mid;
            }
        })),
    ))
}

/// Stacks equally shaped vars along a fresh leading axis.
pub fn stack(parts: &[Var]) -> Result<Var> {
    if parts.is_empty() {
        return Err(Error::op("stack", "no inputs"));
    }
    let mut rows = Vec::with_capacity(parts.len());
    for p in parts {
        let mut shape = vec![1usize];
        shape.extend_from_slice(&p.shape());
        rows.push(p.reshape(&shape)?);
    }
    concat(0, &rows)
}
