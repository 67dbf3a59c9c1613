//! Reverse-mode tape.
//!
//! Every op appends one node, so tape order is already topological and the
//! backward pass is a single reverse scan that visits each node once.
//! Gradients accumulate additively when a value fans out. Backward closures
//! own cheap Arc clones of whatever they need, so running them never touches
//! the tape; nodes whose inputs all have `requires_grad == false` skip the
//! closure entirely, which makes a tape built over frozen leaves a plain
//! value-forward pass.
//!
//! Var handles are only meaningful on the graph that created them.

use std::cell::RefCell;

use crate::dsp::stft::{synthesis_adjoint, synthesize, StftConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::kernels::{self, ConvSpec};
use crate::tensor::{fmt_shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type GradFn<S> = Box<dyn Fn(&Tensor<S>) -> Vec<(usize, Tensor<S>)>>;

struct Node<S: Scalar> {
    value: Tensor<S>,
    requires_grad: bool,
    grad_fn: Option<GradFn<S>>,
}

pub struct Graph<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
}

/// Leaf gradients collected by [`Graph::backward`]. Gradients of interior
/// nodes are consumed during the scan; only nodes without a backward closure
/// (leaves) keep theirs.
pub struct Gradients<S: Scalar> {
    slots: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.slots.get(v.0).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.slots.get_mut(v.0).and_then(|s| s.take())
    }
}

/// Elementwise zip of same-shaped tensors.
fn ew<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: RefCell::new(Vec::new()) }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.borrow().len()
    }

    fn push(&self, value: Tensor<S>, requires_grad: bool, grad_fn: Option<GradFn<S>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, requires_grad, grad_fn });
        Var(nodes.len() - 1)
    }

    pub fn leaf(&self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, None)
    }

    pub fn constant(&self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&self, v: S) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Cheap Arc-backed clone of the node's value.
    pub fn value(&self, v: Var) -> Tensor<S> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn unary_op(
        &self,
        x: Var,
        value: Tensor<S>,
        df: impl Fn(&Tensor<S>) -> Tensor<S> + 'static,
    ) -> Var {
        let req = self.requires_grad(x);
        let grad_fn: Option<GradFn<S>> =
            if req { Some(Box::new(move |g| vec![(x.0, df(g))])) } else { None };
        self.push(value, req, grad_fn)
    }

    fn binary_op(
        &self,
        a: Var,
        b: Var,
        value: Tensor<S>,
        dfa: impl Fn(&Tensor<S>) -> Tensor<S> + 'static,
        dfb: impl Fn(&Tensor<S>) -> Tensor<S> + 'static,
    ) -> Var {
        let (ra, rb) = (self.requires_grad(a), self.requires_grad(b));
        let grad_fn: Option<GradFn<S>> = if ra || rb {
            Some(Box::new(move |g| {
                let mut out = Vec::with_capacity(2);
                if ra {
                    out.push((a.0, dfa(g)));
                }
                if rb {
                    out.push((b.0, dfb(g)));
                }
                out
            }))
        } else {
            None
        };
        self.push(value, ra || rb, grad_fn)
    }

    // -- elementwise ---------------------------------------------------------

    pub fn neg(&self, x: Var) -> Var {
        let v = self.value(x).map(|a| -a);
        self.unary_op(x, v, |g| g.map(|a| -a))
    }

    pub fn add_scalar(&self, x: Var, c: S) -> Var {
        let v = self.value(x).map(|a| a + c);
        self.unary_op(x, v, |g| g.clone())
    }

    pub fn mul_scalar(&self, x: Var, c: S) -> Var {
        let v = self.value(x).map(|a| a * c);
        self.unary_op(x, v, move |g| g.map(|a| a * c))
    }

    pub fn exp(&self, x: Var) -> Var {
        let y = self.value(x).map(|a| a.exp());
        let y2 = y.clone();
        self.unary_op(x, y, move |g| ew(g, &y2, |gv, yv| gv * yv))
    }

    pub fn ln(&self, x: Var) -> Var {
        let xv = self.value(x);
        let y = xv.map(|a| a.ln());
        self.unary_op(x, y, move |g| ew(g, &xv, |gv, a| gv / a))
    }

    pub fn sqrt(&self, x: Var) -> Var {
        let y = self.value(x).map(|a| a.sqrt());
        let y2 = y.clone();
        let half = S::of_f64(0.5);
        self.unary_op(x, y, move |g| ew(g, &y2, |gv, yv| gv * half / yv))
    }

    pub fn erf(&self, x: Var) -> Var {
        let xv = self.value(x);
        let y = xv.map(|a| a.erf());
        // d erf/dx = 2/sqrt(pi) * exp(-x^2)
        let c = S::of_f64(2.0 / std::f64::consts::PI.sqrt());
        self.unary_op(x, y, move |g| ew(g, &xv, |gv, a| gv * c * (-a * a).exp()))
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let y = self.value(x).map(|a| S::one() / (S::one() + (-a).exp()));
        let y2 = y.clone();
        self.unary_op(x, y, move |g| ew(g, &y2, |gv, yv| gv * yv * (S::one() - yv)))
    }

    pub fn tanh(&self, x: Var) -> Var {
        let y = self.value(x).map(|a| a.tanh());
        let y2 = y.clone();
        self.unary_op(x, y, move |g| ew(g, &y2, |gv, yv| gv * (S::one() - yv * yv)))
    }

    pub fn relu(&self, x: Var) -> Var {
        let xv = self.value(x);
        let y = xv.map(|a| if a > S::zero() { a } else { S::zero() });
        self.unary_op(x, y, move |g| {
            ew(g, &xv, |gv, a| if a > S::zero() { gv } else { S::zero() })
        })
    }

    /// `max(0, x) + slope[c] * min(0, x)` with one slope per leading-axis
    /// channel of `x`.
    pub fn prelu(&self, x: Var, slope: Var) -> Result<Var> {
        let xv = self.value(x);
        let sv = self.value(slope);
        if xv.ndim() == 0 || sv.shape() != [xv.shape()[0]] {
            return Err(Error::shape(
                "prelu",
                format!("slope [{}] for x {}", xv.shape().first().unwrap_or(&0), fmt_shape(xv.shape())),
                fmt_shape(sv.shape()),
            ));
        }
        let channels = xv.shape()[0];
        let inner = xv.len() / channels;
        let mut out = vec![S::zero(); xv.len()];
        for c in 0..channels {
            let a = sv.data()[c];
            for i in 0..inner {
                let v = xv.data()[c * inner + i];
                out[c * inner + i] = if v > S::zero() { v } else { a * v };
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out);
        let (rx, rs) = (self.requires_grad(x), self.requires_grad(slope));
        let grad_fn: Option<GradFn<S>> = if rx || rs {
            let xv2 = xv.clone();
            let sv2 = sv.clone();
            Some(Box::new(move |g| {
                let mut pairs = Vec::with_capacity(2);
                if rx {
                    let mut dx = vec![S::zero(); xv2.len()];
                    for c in 0..channels {
                        let a = sv2.data()[c];
                        for i in 0..inner {
                            let idx = c * inner + i;
                            let scale = if xv2.data()[idx] > S::zero() { S::one() } else { a };
                            dx[idx] = g.data()[idx] * scale;
                        }
                    }
                    pairs.push((x.0, Tensor::new(xv2.shape().to_vec(), dx)));
                }
                if rs {
                    let mut ds = vec![S::zero(); channels];
                    for c in 0..channels {
                        let mut acc = S::zero();
                        for i in 0..inner {
                            let idx = c * inner + i;
                            let v = xv2.data()[idx];
                            if v < S::zero() {
                                acc = acc + g.data()[idx] * v;
                            }
                        }
                        ds[c] = acc;
                    }
                    pairs.push((slope.0, Tensor::new(vec![channels], ds)));
                }
                pairs
            }))
        } else {
            None
        };
        Ok(self.push(value, rx || rs, grad_fn))
    }

    // -- broadcast binary ----------------------------------------------------
    //
    // The left operand fixes the output shape; the right may broadcast into
    // it over trailing dimensions.

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let value = kernels::broadcast_zip(&va, &vb, |x, y| x + y)?;
        let b_shape = vb.shape().to_vec();
        Ok(self.binary_op(
            a,
            b,
            value,
            |g| g.clone(),
            move |g| kernels::reduce_to_shape(g, &b_shape),
        ))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let value = kernels::broadcast_zip(&va, &vb, |x, y| x - y)?;
        let b_shape = vb.shape().to_vec();
        Ok(self.binary_op(
            a,
            b,
            value,
            |g| g.clone(),
            move |g| kernels::reduce_to_shape(&g.map(|v| -v), &b_shape),
        ))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let value = kernels::broadcast_zip(&va, &vb, |x, y| x * y)?;
        let vb2 = vb.clone();
        let b_shape = vb.shape().to_vec();
        Ok(self.binary_op(
            a,
            b,
            value,
            move |g| kernels::broadcast_zip(g, &vb2, |gv, bv| gv * bv).expect("shape fixed"),
            move |g| kernels::reduce_to_shape(&ew(g, &va, |gv, av| gv * av), &b_shape),
        ))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let value = kernels::broadcast_zip(&va, &vb, |x, y| x / y)?;
        let vb2 = vb.clone();
        let vb3 = vb.clone();
        let b_shape = vb.shape().to_vec();
        Ok(self.binary_op(
            a,
            b,
            value,
            move |g| kernels::broadcast_zip(g, &vb2, |gv, bv| gv / bv).expect("shape fixed"),
            move |g| {
                let num = ew(g, &va, |gv, av| gv * av);
                let full = kernels::broadcast_zip(&num, &vb3, |n, bv| -n / (bv * bv))
                    .expect("shape fixed");
                kernels::reduce_to_shape(&full, &b_shape)
            },
        ))
    }

    // -- linear algebra ------------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let value = kernels::matmul(&va, &vb)?;
        let vb2 = vb.clone();
        Ok(self.binary_op(
            a,
            b,
            value,
            move |g| kernels::matmul(g, &kernels::transpose2d(&vb2)).expect("adjoint shape"),
            move |g| kernels::matmul(&kernels::transpose2d(&va), g).expect("adjoint shape"),
        ))
    }

    pub fn conv2d(&self, x: Var, w: Var, spec: ConvSpec) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let value = kernels::conv2d(&xv, &wv, &spec)?;
        let (t_in, f_in) = (xv.shape()[1], xv.shape()[2]);
        let (k_t, k_f) = (wv.shape()[2], wv.shape()[3]);
        let wv2 = wv.clone();
        Ok(self.binary_op(
            x,
            w,
            value,
            move |g| kernels::tconv2d(g, &wv2, &spec, t_in, f_in).expect("adjoint shape"),
            move |g| kernels::conv2d_grad_weight(&xv, g, &spec, k_t, k_f),
        ))
    }

    pub fn tconv2d(
        &self,
        y: Var,
        w: Var,
        spec: ConvSpec,
        out_t: usize,
        out_f: usize,
    ) -> Result<Var> {
        let (yv, wv) = (self.value(y), self.value(w));
        let value = kernels::tconv2d(&yv, &wv, &spec, out_t, out_f)?;
        let (k_t, k_f) = (wv.shape()[2], wv.shape()[3]);
        let wv2 = wv.clone();
        Ok(self.binary_op(
            y,
            w,
            value,
            move |g| kernels::conv2d(g, &wv2, &spec).expect("adjoint shape"),
            move |g| kernels::tconv2d_grad_weight(&yv, g, &spec, k_t, k_f),
        ))
    }

    // -- structure -----------------------------------------------------------

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<Tensor<S>> = parts.iter().map(|&p| self.value(p)).collect();
        let refs: Vec<&Tensor<S>> = values.iter().collect();
        let value = kernels::concat_axis(&refs, axis)?;
        let mut meta = Vec::with_capacity(parts.len());
        let mut offset = 0usize;
        let mut any = false;
        for (&p, v) in parts.iter().zip(values.iter()) {
            let req = self.requires_grad(p);
            any |= req;
            meta.push((p.0, offset, v.shape()[axis], req));
            offset += v.shape()[axis];
        }
        let grad_fn: Option<GradFn<S>> = if any {
            Some(Box::new(move |g| {
                meta.iter()
                    .filter(|(_, _, _, req)| *req)
                    .map(|&(id, off, len, _)| (id, kernels::slice_axis(g, axis, off, len)))
                    .collect()
            }))
        } else {
            None
        };
        Ok(self.push(value, any, grad_fn))
    }

    pub fn slice(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.ndim() || start + len > xv.shape()[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) within axis {axis} of {}", start + len, fmt_shape(xv.shape())),
                "out of range".to_string(),
            ));
        }
        let full = xv.shape()[axis];
        let value = kernels::slice_axis(&xv, axis, start, len);
        Ok(self.unary_op(x, value, move |g| kernels::scatter_axis(g, axis, start, full)))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let value = xv.reshaped(shape)?;
        let orig = xv.shape().to_vec();
        Ok(self.unary_op(x, value, move |g| g.reshaped(&orig).expect("same length")))
    }

    pub fn permute(&self, x: Var, perm: &[usize]) -> Var {
        let value = kernels::permute(&self.value(x), perm);
        let inv = kernels::invert_perm(perm);
        self.unary_op(x, value, move |g| kernels::permute(g, &inv))
    }

    pub fn shift(&self, x: Var, axis: usize, offset: isize) -> Var {
        let value = kernels::shift_axis(&self.value(x), axis, offset);
        self.unary_op(x, value, move |g| kernels::shift_axis(g, axis, -offset))
    }

    // -- reductions ----------------------------------------------------------

    pub fn sum_all(&self, x: Var) -> Var {
        let xv = self.value(x);
        let total: S = xv.data().iter().copied().sum();
        let shape = xv.shape().to_vec();
        self.unary_op(x, Tensor::scalar(total), move |g| {
            Tensor::full(&shape, g.data()[0])
        })
    }

    pub fn mean_all(&self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum_all(x);
        self.mul_scalar(s, S::one() / S::of_usize(n))
    }

    pub fn sum_axis(&self, x: Var, axis: usize, keepdim: bool) -> Var {
        let xv = self.value(x);
        let len = xv.shape()[axis];
        let value = kernels::sum_axis(&xv, axis, keepdim);
        self.unary_op(x, value, move |g| kernels::repeat_axis(g, axis, len, keepdim))
    }

    pub fn cumsum(&self, x: Var, axis: usize) -> Var {
        let value = kernels::cumsum_axis(&self.value(x), axis);
        self.unary_op(x, value, move |g| kernels::revcumsum_axis(g, axis))
    }

    // -- spectral synthesis ----------------------------------------------------

    /// Fused overlap-add synthesis of a `[T, bins]` spectrum pair down to a
    /// waveform node. Gradients flow back through one forward transform per
    /// frame rather than through unrolled elementwise ops.
    pub fn istft(&self, re: Var, im: Var, cfg: StftConfig) -> Result<Var> {
        let (rev, imv) = (self.value(re), self.value(im));
        let wave = synthesize(&rev, &imv, &cfg)?;
        let t_frames = rev.shape()[0];
        let n = wave.len();
        let (rr, ri) = (self.requires_grad(re), self.requires_grad(im));
        let grad_fn: Option<GradFn<S>> = if rr || ri {
            Some(Box::new(move |g| {
                let (gre, gim) = synthesis_adjoint(g.data(), t_frames, &cfg);
                let mut out = Vec::with_capacity(2);
                if rr {
                    out.push((re.0, gre));
                }
                if ri {
                    out.push((im.0, gim));
                }
                out
            }))
        } else {
            None
        };
        Ok(self.push(Tensor::new(vec![n], wave), rr || ri, grad_fn))
    }

    // -- backward ------------------------------------------------------------

    /// Reverse scan from a scalar loss. Returns one gradient slot per node;
    /// interior slots are consumed as the scan passes them, so only leaves
    /// remain readable.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let nodes = self.nodes.borrow();
        let loss_node = nodes.get(loss.0).ok_or_else(|| {
            Error::Data(format!("backward from unknown node {}", loss.0))
        })?;
        if loss_node.value.len() != 1 {
            return Err(Error::shape(
                "backward",
                "scalar loss".to_string(),
                fmt_shape(loss_node.value.shape()),
            ));
        }
        let mut slots: Vec<Option<Tensor<S>>> = (0..nodes.len()).map(|_| None).collect();
        slots[loss.0] = Some(Tensor::scalar(S::one()));
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if slots[id].is_none() || node.grad_fn.is_none() {
                continue;
            }
            let g = slots[id].take().expect("checked above");
            let pairs = (node.grad_fn.as_ref().expect("checked above"))(&g);
            for (pid, pg) in pairs {
                debug_assert!(pid < id, "tape order must be topological");
                match &mut slots[pid] {
                    None => slots[pid] = Some(pg),
                    Some(acc) => {
                        debug_assert_eq!(acc.shape(), pg.shape());
                        *acc = ew(acc, &pg, |a, b| a + b);
                    }
                }
            }
        }
        Ok(Gradients { slots })
    }
}
