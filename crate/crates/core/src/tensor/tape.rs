//! Reverse-mode autodiff on a Wengert tape.
//!
//! Every operation appends a node (the forward value) and, when gradients are
//! enabled and an input requires them, a backward closure. `backward` walks
//! the tape once in reverse, seeding the root with 1 and letting each closure
//! scatter into its inputs' gradient buffers. Gradient buffers are allocated
//! lazily and intermediate ones are freed as soon as they have been consumed,
//! so peak memory stays close to the forward pass.
//!
//! Determinism: no hashing, no threads, fixed loop orders. Two identical
//! forward/backward passes produce bitwise identical numbers.

use super::kernels;
use super::param::{ParamId, ParamStore};
use super::{sc, Scalar, Tensor};
use crate::error::{Error, Result};
use rand::Rng;

/// Handle to a value on the tape. Only meaningful for the tape that made it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

pub(crate) struct Node<S> {
    value: Tensor<S>,
    requires_grad: bool,
    param: Option<ParamId>,
}

type BackOp<S> = Box<dyn FnOnce(&[Node<S>], &[S], &mut [Option<Vec<S>>]) + Send>;

/// Additive mask value for disallowed attention positions.
pub const MASK_NEG: f64 = -1e9;

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    backops: Vec<Option<BackOp<S>>>,
    grads: Vec<Option<Vec<S>>>,
    grad_enabled: bool,
    done: bool,
}

/// Get-or-create the gradient buffer for a node.
fn acc<S: Scalar>(grads: &mut [Option<Vec<S>>], id: usize, len: usize) -> &mut [S] {
    grads[id]
        .get_or_insert_with(|| vec![S::zero(); len])
        .as_mut_slice()
}

/// `x^e` with fast paths for the half-integer exponents the lp sweep uses.
/// Falls back to `powf` for anything else.
pub(crate) fn pow_fast<S: Scalar>(x: S, e: f64) -> S {
    if e == 1.0 {
        return x;
    }
    if e == 2.0 {
        return x * x;
    }
    let doubled = e * 2.0;
    if doubled.fract() == 0.0 && doubled.abs() <= 16.0 {
        let n = doubled as i32;
        let whole = n.div_euclid(2);
        let half = n.rem_euclid(2);
        let base = x.powi(whole);
        if half == 1 {
            return base * x.sqrt();
        }
        return base;
    }
    x.powf(sc(e))
}

impl<S: Scalar> Tape<S> {
    /// Tape that records backward closures.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backops: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
            done: false,
        }
    }

    /// Tape for evaluation/generation: identical forward numerics, no
    /// closures recorded, `backward` is an error.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Tape::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, requires_grad: bool, param: Option<ParamId>) -> Var {
        let rg = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value,
            requires_grad: rg,
            param,
        });
        self.backops.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push_op(
        &mut self,
        value: Tensor<S>,
        requires_grad: bool,
        back: impl FnOnce(&[Node<S>], &[S], &mut [Option<Vec<S>>]) + Send + 'static,
    ) -> Var {
        let rg = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value,
            requires_grad: rg,
            param: None,
        });
        self.backops
            .push(if rg { Some(Box::new(back)) } else { None });
        Var(self.nodes.len() - 1)
    }

    /// A value that never needs gradients.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, false, None)
    }

    /// A differentiable leaf that is not a parameter (used by tests and
    /// gradient checks; its gradient survives `backward`).
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, true, None)
    }

    /// Bind a parameter: copies its current value onto the tape and tags the
    /// node so `export_grads` can route the gradient back to the store.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        let value = store.value(id).clone();
        self.push(value, true, Some(id))
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn data_of(&self, v: Var) -> &[S] {
        self.nodes[v.0].value.data()
    }

    /// Gradient of a leaf/parameter node after `backward` (interior node
    /// gradients are freed during the sweep).
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn require(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- reverse sweep --------------------------------------------------

    /// Run reverse-mode accumulation from a scalar root. One shot per tape.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.grad_enabled {
            return Err(Error::Contract(
                "backward called on an inference tape".into(),
            ));
        }
        if self.done {
            return Err(Error::Contract(
                "backward called twice on the same tape".into(),
            ));
        }
        let root_shape = self.nodes[root.0].value.shape();
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be a scalar, got shape {root_shape:?}"
            )));
        }
        self.done = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<S>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(vec![S::one()]);
        for i in (0..n).rev() {
            let Some(op) = self.backops[i].take() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue; // node does not influence the root
            };
            op(&self.nodes, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    /// Copy accumulated parameter gradients back into the store.
    pub fn export_grads(&self, store: &mut ParamStore<S>) -> Result<()> {
        if !self.done {
            return Err(Error::Contract(
                "export_grads called before backward".into(),
            ));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(pid) = node.param {
                if let Some(g) = &self.grads[i] {
                    store.accumulate_grad(pid, g)?;
                }
            }
        }
        Ok(())
    }

    // ---- linear algebra --------------------------------------------------

    /// `[m,k] @ [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.value(a).shape(), self.value(b).shape());
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ash.to_vec(),
                rhs: bsh.to_vec(),
            });
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let mut out = vec![S::zero(); m * n];
        kernels::mm_nn_acc(self.data_of(a), self.data_of(b), &mut out, m, k, n);
        let rg = self.require(a) || self.require(b);
        Ok(
            self.push_op(Tensor::new(vec![m, n], out)?, rg, move |nodes, g, grads| {
                if nodes[a.0].requires_grad {
                    let bd = nodes[b.0].value.data();
                    // borrow grads after reading values
                    let da = acc(grads, a.0, m * k);
                    kernels::mm_nt_acc(g, bd, da, m, k, n);
                }
                if nodes[b.0].requires_grad {
                    let ad = nodes[a.0].value.data();
                    let db = acc(grads, b.0, k * n);
                    kernels::mm_tn_acc(ad, g, db, m, k, n);
                }
            }),
        )
    }

    /// `[m,k] @ [n,k]^T -> [m,n]` (shared-weight output head)
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.value(a).shape(), self.value(b).shape());
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[1] {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                lhs: ash.to_vec(),
                rhs: bsh.to_vec(),
            });
        }
        let (m, k, n) = (ash[0], ash[1], bsh[0]);
        let mut out = vec![S::zero(); m * n];
        kernels::mm_nt_acc(self.data_of(a), self.data_of(b), &mut out, m, n, k);
        let rg = self.require(a) || self.require(b);
        Ok(
            self.push_op(Tensor::new(vec![m, n], out)?, rg, move |nodes, g, grads| {
                if nodes[a.0].requires_grad {
                    let bd = nodes[b.0].value.data();
                    let da = acc(grads, a.0, m * k);
                    kernels::mm_nn_acc(g, bd, da, m, n, k);
                }
                if nodes[b.0].requires_grad {
                    let ad = nodes[a.0].value.data();
                    let db = acc(grads, b.0, n * k);
                    kernels::mm_tn_acc(g, ad, db, m, n, k);
                }
            }),
        )
    }

    /// Batched matmul: `[N,m,k] @ [N,k,n] -> [N,m,n]`
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.value(a).shape(), self.value(b).shape());
        if ash.len() != 3 || bsh.len() != 3 || ash[0] != bsh[0] || ash[2] != bsh[1] {
            return Err(Error::ShapeMismatch {
                op: "bmm",
                lhs: ash.to_vec(),
                rhs: bsh.to_vec(),
            });
        }
        let (nb, m, k, n) = (ash[0], ash[1], ash[2], bsh[2]);
        let mut out = vec![S::zero(); nb * m * n];
        {
            let ad = self.data_of(a);
            let bd = self.data_of(b);
            for s in 0..nb {
                kernels::mm_nn_acc(
                    &ad[s * m * k..(s + 1) * m * k],
                    &bd[s * k * n..(s + 1) * k * n],
                    &mut out[s * m * n..(s + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let rg = self.require(a) || self.require(b);
        Ok(self.push_op(
            Tensor::new(vec![nb, m, n], out)?,
            rg,
            move |nodes, g, grads| {
                if nodes[a.0].requires_grad {
                    let bd = nodes[b.0].value.data();
                    let da = acc(grads, a.0, nb * m * k);
                    for s in 0..nb {
                        kernels::mm_nt_acc(
                            &g[s * m * n..(s + 1) * m * n],
                            &bd[s * k * n..(s + 1) * k * n],
                            &mut da[s * m * k..(s + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                }
                if nodes[b.0].requires_grad {
                    let ad = nodes[a.0].value.data();
                    let db = acc(grads, b.0, nb * k * n);
                    for s in 0..nb {
                        kernels::mm_tn_acc(
                            &ad[s * m * k..(s + 1) * m * k],
                            &g[s * m * n..(s + 1) * m * n],
                            &mut db[s * k * n..(s + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            },
        ))
    }

    /// Swap the trailing two axes: `[..., r, c] -> [..., c, r]`
    pub fn transpose_last_two(&mut self, x: Var) -> Result<Var> {
        let sh = self.value(x).shape().to_vec();
        if sh.len() < 2 {
            return Err(Error::InvalidShape {
                op: "transpose_last_two",
                shape: sh,
                detail: "needs at least 2 dimensions".into(),
            });
        }
        let (r, c) = (sh[sh.len() - 2], sh[sh.len() - 1]);
        let slices = self.value(x).numel() / (r * c);
        let xd = self.data_of(x);
        let mut out = vec![S::zero(); xd.len()];
        for s in 0..slices {
            let base = s * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[base + j * r + i] = xd[base + i * c + j];
                }
            }
        }
        let mut osh = sh.clone();
        let nd = osh.len();
        osh.swap(nd - 2, nd - 1);
        let rg = self.require(x);
        Ok(
            self.push_op(Tensor::new(osh, out)?, rg, move |nodes, g, grads| {
                let n = nodes[x.0].value.numel();
                let dx = acc(grads, x.0, n);
                for s in 0..slices {
                    let base = s * r * c;
                    for i in 0..r {
                        for j in 0..c {
                            dx[base + i * c + j] = dx[base + i * c + j] + g[base + j * r + i];
                        }
                    }
                }
            }),
        )
    }

    /// Reinterpret the buffer with a new shape (same element count).
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let want: usize = shape.iter().product();
        if shape.is_empty() || want != self.value(x).numel() {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape,
                detail: format!("input has {} elements", self.value(x).numel()),
            });
        }
        let out = Tensor::new(shape, self.data_of(x).to_vec())?;
        let rg = self.require(x);
        Ok(self.push_op(out, rg, move |nodes, g, grads| {
            let n = nodes[x.0].value.numel();
            let dx = acc(grads, x.0, n);
            for (d, &s) in dx.iter_mut().zip(g) {
                *d = *d + s;
            }
        }))
    }

    // ---- pointwise arithmetic ---------------------------------------------

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let data: Vec<S> = self
            .data_of(a)
            .iter()
            .zip(self.data_of(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.require(a) || self.require(b);
        Ok(
            self.push_op(Tensor::new(shape, data)?, rg, move |nodes, g, grads| {
                for v in [a, b] {
                    if nodes[v.0].requires_grad {
                        let d = acc(grads, v.0, g.len());
                        for (dst, &src) in d.iter_mut().zip(g) {
                            *dst = *dst + src;
                        }
                    }
                }
            }),
        )
    }

    /// Add a `[n]` row vector to every row of `[m,n]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xsh, rsh) = (self.value(x).shape(), self.value(row).shape());
        if xsh.len() != 2 || rsh.len() != 1 || xsh[1] != rsh[0] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: xsh.to_vec(),
                rhs: rsh.to_vec(),
            });
        }
        let (m, n) = (xsh[0], xsh[1]);
        let xd = self.data_of(x);
        let rd = self.data_of(row);
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = xd[i * n + j] + rd[j];
            }
        }
        let rg = self.require(x) || self.require(row);
        Ok(
            self.push_op(Tensor::new(vec![m, n], out)?, rg, move |nodes, g, grads| {
                if nodes[x.0].requires_grad {
                    let dx = acc(grads, x.0, m * n);
                    for (d, &s) in dx.iter_mut().zip(g) {
                        *d = *d + s;
                    }
                }
                if nodes[row.0].requires_grad {
                    let dr = acc(grads, row.0, n);
                    for i in 0..m {
                        for j in 0..n {
                            dr[j] = dr[j] + g[i * n + j];
                        }
                    }
                }
            }),
        )
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let data: Vec<S> = self
            .data_of(a)
            .iter()
            .zip(self.data_of(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.require(a) || self.require(b);
        Ok(
            self.push_op(Tensor::new(shape, data)?, rg, move |nodes, g, grads| {
                if nodes[a.0].requires_grad {
                    let bd = nodes[b.0].value.data();
                    let da = acc(grads, a.0, g.len());
                    for j in 0..g.len() {
                        da[j] = da[j] + g[j] * bd[j];
                    }
                }
                if nodes[b.0].requires_grad {
                    let ad = nodes[a.0].value.data();
                    let db = acc(grads, b.0, g.len());
                    for j in 0..g.len() {
                        db[j] = db[j] + g[j] * ad[j];
                    }
                }
            }),
        )
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let k: S = sc(c);
        let data: Vec<S> = self.data_of(x).iter().map(|&v| v * k).collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.require(x);
        self.push_op(
            Tensor::new(shape, data).expect("same shape"),
            rg,
            move |_nodes, g, grads| {
                let dx = acc(grads, x.0, g.len());
                for j in 0..g.len() {
                    dx[j] = dx[j] + g[j] * k;
                }
            },
        )
    }

    /// Multiply a tensor by a learnable scalar (shape `[1]`).
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::InvalidShape {
                op: "mul_scalar_var",
                shape: self.value(s).shape().to_vec(),
                detail: "scalar operand must have exactly one element".into(),
            });
        }
        let sv = self.value(s).item();
        let data: Vec<S> = self.data_of(x).iter().map(|&v| v * sv).collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.require(x) || self.require(s);
        Ok(
            self.push_op(Tensor::new(shape, data)?, rg, move |nodes, g, grads| {
                if nodes[x.0].requires_grad {
                    let sv = nodes[s.0].value.item();
                    let dx = acc(grads, x.0, g.len());
                    for j in 0..g.len() {
                        dx[j] = dx[j] + g[j] * sv;
                    }
                }
                if nodes[s.0].requires_grad {
                    let xd = nodes[x.0].value.data();
                    let mut tot = S::zero();
                    for j in 0..g.len() {
                        tot = tot + g[j] * xd[j];
                    }
                    let ds = acc(grads, s.0, 1);
                    ds[0] = ds[0] + tot;
                }
            }),
        )
    }

    /// Scale each length-`d` row of `[..., d]` by the matching entry of a
    /// row-scalar tensor (shape = leading dims of `x`).
    pub fn mul_last_axis(&mut self, x: Var, r: Var) -> Result<Var> {
        let xsh = self.value(x).shape().to_vec();
        let d = *xsh.last().unwrap();
        let rows = self.value(x).numel() / d;
        if self.value(r).numel() != rows {
            return Err(Error::ShapeMismatch {
                op: "mul_last_axis",
                lhs: xsh,
                rhs: self.value(r).shape().to_vec(),
            });
        }
        let xd = self.data_of(x);
        let rd = self.data_of(r);
        let mut out = vec![S::zero(); xd.len()];
        for i in 0..rows {
            let rv = rd[i];
            for j in 0..d {
                out[i * d + j] = xd[i * d + j] * rv;
            }
        }
        let rg = self.require(x) || self.require(r);
        Ok(self.push_op(
            Tensor::new(self.value(x).shape().to_vec(), out)?,
            rg,
            move |nodes, g, grads| {
                if nodes[x.0].requires_grad {
                    let rd = nodes[r.0].value.data();
                    let dx = acc(grads, x.0, rows * d);
                    for i in 0..rows {
                        let rv = rd[i];
                        for j in 0..d {
                            dx[i * d + j] = dx[i * d + j] + g[i * d + j] * rv;
                        }
                    }
                }
                if nodes[r.0].requires_grad {
                    let xd = nodes[x.0].value.data();
                    let dr = acc(grads, r.0, rows);
                    for i in 0..rows {
                        let mut tot = S::zero();
                        for j in 0..d {
                            tot = tot + g[i * d + j] * xd[i * d + j];
                        }
                        dr[i] = dr[i] + tot;
                    }
                }
            },
        ))
    }

    // ---- unary maps -------------------------------------------------------

    fn unary(&mut self, x: Var, f: impl Fn(S) -> S, df: impl Fn(S) -> S + Send + 'static) -> Var {
        let data: Vec<S> = self.data_of(x).iter().map(|&v| f(v)).collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.require(x);
        self.push_op(
            Tensor::new(shape, data).expect("same shape"),
            rg,
            move |nodes, g, grads| {
                let xd = nodes[x.0].value.data();
                let dx = acc(grads, x.0, xd.len());
                for j in 0..xd.len() {
                    dx[j] = dx[j] + g[j] * df(xd[j]);
                }
            },
        )
    }

    /// |x|; subgradient 0 at the origin.
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| v.abs(),
            |v| {
                if v > S::zero() {
                    S::one()
                } else if v < S::zero() {
                    -S::one()
                } else {
                    S::zero()
                }
            },
        )
    }

    /// x^e for a fixed exponent. The derivative is defined as 0 at x == 0,
    /// which keeps |.|^p compositions finite for p < 2 exponents.
    pub fn pow_scalar(&mut self, x: Var, e: f64) -> Var {
        self.unary(
            x,
            move |v| pow_fast(v, e),
            move |v| {
                if v == S::zero() {
                    S::zero()
                } else {
                    sc::<S>(e) * pow_fast(v, e - 1.0)
                }
            },
        )
    }

    /// max(x, c); gradient 0 on the clamped side.
    pub fn clamp_min(&mut self, x: Var, c: f64) -> Var {
        let k: S = sc(c);
        self.unary(
            x,
            move |v| if v > k { v } else { k },
            move |v| if v > k { S::one() } else { S::zero() },
        )
    }

    /// sqrt(x); gradient 0 at x <= 0.
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| v.sqrt(),
            |v| {
                if v > S::zero() {
                    sc::<S>(0.5) / v.sqrt()
                } else {
                    S::zero()
                }
            },
        )
    }

    /// Numerically stable softplus ln(1 + e^x).
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| {
                let vf = v.to_f64();
                sc(vf.max(0.0) + (-vf.abs()).exp().ln_1p())
            },
            |v| {
                let vf = v.to_f64();
                sc(1.0 / (1.0 + (-vf).exp()))
            },
        )
    }

    /// GELU with the tanh approximation used by GPT-style models.
    pub fn gelu(&mut self, x: Var) -> Var {
        const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const C: f64 = 0.044715;
        self.unary(
            x,
            |v| {
                let xf = v.to_f64();
                let u = K * (xf + C * xf * xf * xf);
                sc(0.5 * xf * (1.0 + u.tanh()))
            },
            |v| {
                let xf = v.to_f64();
                let u = K * (xf + C * xf * xf * xf);
                let t = u.tanh();
                let du = K * (1.0 + 3.0 * C * xf * xf);
                sc(0.5 * (1.0 + t) + 0.5 * xf * (1.0 - t * t) * du)
            },
        )
    }

    /// Inverted dropout: keep with probability 1-rate and scale kept values
    /// by 1/(1-rate) so expectations match evaluation. rate == 0 is identity.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep_scale: S = sc(1.0 / (1.0 - rate));
        let xd = self.data_of(x);
        let mut mask = vec![S::zero(); xd.len()];
        let mut out = vec![S::zero(); xd.len()];
        for j in 0..xd.len() {
            if rng.gen::<f64>() >= rate {
                mask[j] = keep_scale;
                out[j] = xd[j] * keep_scale;
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.require(x);
        Ok(
            self.push_op(Tensor::new(shape, out)?, rg, move |_nodes, g, grads| {
                let dx = acc(grads, x.0, g.len());
                for j in 0..g.len() {
                    dx[j] = dx[j] + g[j] * mask[j];
                }
            }),
        )
    }

    // ---- reductions -------------------------------------------------------

    /// Sum over the trailing axis: `[..., d] -> [...]` (`[d] -> [1]`).
    pub fn sum_last_axis(&mut self, x: Var) -> Var {
        let xsh = self.value(x).shape().to_vec();
        let d = *xsh.last().unwrap();
        let rows = self.value(x).numel() / d;
        let xd = self.data_of(x);
        let mut out = vec![S::zero(); rows];
        for i in 0..rows {
            let mut tot = S::zero();
            for j in 0..d {
                tot = tot + xd[i * d + j];
            }
            out[i] = tot;
        }
        let osh = if xsh.len() == 1 {
            vec![1]
        } else {
            xsh[..xsh.len() - 1].to_vec()
        };
        let rg = self.require(x);
        self.push_op(
            Tensor::new(osh, out).expect("row count"),
            rg,
            move |_nodes, g, grads| {
                let dx = acc(grads, x.0, rows * d);
                for i in 0..rows {
                    for j in 0..d {
                        dx[i * d + j] = dx[i * d + j] + g[i];
                    }
                }
            },
        )
    }

    /// Sum of every element -> `[1]`.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let xd = self.data_of(x);
        let mut tot = S::zero();
        for &v in xd {
            tot = tot + v;
        }
        let n = xd.len();
        let rg = self.require(x);
        self.push_op(Tensor::scalar(tot), rg, move |_nodes, g, grads| {
            let dx = acc(grads, x.0, n);
            for d in dx.iter_mut() {
                *d = *d + g[0];
            }
        })
    }

    // ---- structured ops ----------------------------------------------------

    /// Gather rows of an embedding table: `table[V,d]`, ids (len n) -> `[n,d]`.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let tsh = self.value(table).shape();
        if tsh.len() != 2 {
            return Err(Error::InvalidShape {
                op: "embedding_lookup",
                shape: tsh.to_vec(),
                detail: "table must be 2-dimensional".into(),
            });
        }
        let (v, d) = (tsh[0], tsh[1]);
        for &id in ids {
            if id as usize >= v {
                return Err(Error::Decoding { id, vocab: v });
            }
        }
        let td = self.data_of(table);
        let mut out = vec![S::zero(); ids.len() * d];
        for (r, &id) in ids.iter().enumerate() {
            let src = &td[id as usize * d..(id as usize + 1) * d];
            out[r * d..(r + 1) * d].copy_from_slice(src);
        }
        let ids_owned: Vec<u32> = ids.to_vec();
        let n = ids.len();
        let rg = self.require(table);
        Ok(self.push_op(
            Tensor::new(vec![n, d], out)?,
            rg,
            move |_nodes, g, grads| {
                let dt = acc(grads, table.0, v * d);
                for (r, &id) in ids_owned.iter().enumerate() {
                    let dst = &mut dt[id as usize * d..(id as usize + 1) * d];
                    let src = &g[r * d..(r + 1) * d];
                    for j in 0..d {
                        dst[j] = dst[j] + src[j];
                    }
                }
            },
        ))
    }

    /// `[batch*seq, heads*dk] -> [batch*heads, seq, dk]`
    pub fn split_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let xsh = self.value(x).shape().to_vec();
        if xsh.len() != 2 || xsh[0] != batch * seq || !xsh[1].is_multiple_of(heads) {
            return Err(Error::InvalidShape {
                op: "split_heads",
                shape: xsh,
                detail: format!("expected [batch*seq={}, heads*dk]", batch * seq),
            });
        }
        let d = xsh[1];
        let dk = d / heads;
        let xd = self.data_of(x);
        let mut out = vec![S::zero(); xd.len()];
        for b in 0..batch {
            for t in 0..seq {
                for h in 0..heads {
                    let src = (b * seq + t) * d + h * dk;
                    let dst = ((b * heads + h) * seq + t) * dk;
                    out[dst..dst + dk].copy_from_slice(&xd[src..src + dk]);
                }
            }
        }
        let rg = self.require(x);
        Ok(self.push_op(
            Tensor::new(vec![batch * heads, seq, dk], out)?,
            rg,
            move |_nodes, g, grads| {
                let dx = acc(grads, x.0, batch * seq * d);
                for b in 0..batch {
                    for t in 0..seq {
                        for h in 0..heads {
                            let xi = (b * seq + t) * d + h * dk;
                            let gi = ((b * heads + h) * seq + t) * dk;
                            for c in 0..dk {
                                dx[xi + c] = dx[xi + c] + g[gi + c];
                            }
                        }
                    }
                }
            },
        ))
    }

    /// `[batch*heads, seq, dk] -> [batch*seq, heads*dk]` (inverse of split)
    pub fn merge_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let xsh = self.value(x).shape().to_vec();
        if xsh.len() != 3 || xsh[0] != batch * heads || xsh[1] != seq {
            return Err(Error::InvalidShape {
                op: "merge_heads",
                shape: xsh,
                detail: format!("expected [batch*heads={}, seq={seq}, dk]", batch * heads),
            });
        }
        let dk = xsh[2];
        let d = heads * dk;
        let xd = self.data_of(x);
        let mut out = vec![S::zero(); xd.len()];
        for b in 0..batch {
            for t in 0..seq {
                for h in 0..heads {
                    let src = ((b * heads + h) * seq + t) * dk;
                    let dst = (b * seq + t) * d + h * dk;
                    out[dst..dst + dk].copy_from_slice(&xd[src..src + dk]);
                }
            }
        }
        let rg = self.require(x);
        Ok(self.push_op(
            Tensor::new(vec![batch * seq, d], out)?,
            rg,
            move |_nodes, g, grads| {
                let dx = acc(grads, x.0, batch * heads * seq * dk);
                for b in 0..batch {
                    for t in 0..seq {
                        for h in 0..heads {
                            let xi = ((b * heads + h) * seq + t) * dk;
                            let gi = (b * seq + t) * d + h * dk;
                            for c in 0..dk {
                                dx[xi + c] = dx[xi + c] + g[gi + c];
                            }
                        }
                    }
                }
            },
        ))
    }

    /// Add -1e9 to score entries above the diagonal (future positions) of
    /// each `[T,T]` slice.
    pub fn causal_mask(&mut self, scores: Var) -> Result<Var> {
        let sh = self.value(scores).shape().to_vec();
        if sh.len() != 3 || sh[1] != sh[2] {
            return Err(Error::InvalidShape {
                op: "causal_mask",
                shape: sh,
                detail: "expected [batch*heads, T, T]".into(),
            });
        }
        let (nb, t) = (sh[0], sh[1]);
        let neg: S = sc(MASK_NEG);
        let xd = self.data_of(scores);
        let mut out = xd.to_vec();
        for s in 0..nb {
            for i in 0..t {
                for j in (i + 1)..t {
                    let idx = (s * t + i) * t + j;
                    out[idx] = out[idx] + neg;
                }
            }
        }
        let rg = self.require(scores);
        Ok(
            self.push_op(Tensor::new(sh, out)?, rg, move |_nodes, g, grads| {
                let dx = acc(grads, scores.0, g.len());
                for (d, &s) in dx.iter_mut().zip(g) {
                    *d = *d + s;
                }
            }),
        )
    }

    /// Row softmax over the trailing axis with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xsh = self.value(x).shape().to_vec();
        let d = *xsh.last().unwrap();
        let rows = self.value(x).numel() / d;
        let xd = self.data_of(x);
        let mut out = vec![S::zero(); xd.len()];
        for i in 0..rows {
            let row = &xd[i * d..(i + 1) * d];
            let mut mx = row[0];
            for &v in row {
                if v > mx {
                    mx = v;
                }
            }
            let orow = &mut out[i * d..(i + 1) * d];
            let mut tot = S::zero();
            for j in 0..d {
                let e = (row[j] - mx).exp();
                orow[j] = e;
                tot = tot + e;
            }
            for v in orow.iter_mut() {
                *v = *v / tot;
            }
        }
        let out_id = self.nodes.len();
        let rg = self.require(x);
        self.push_op(
            Tensor::new(xsh, out).expect("same shape"),
            rg,
            move |nodes, g, grads| {
                let y = nodes[out_id].value.data();
                let dx = acc(grads, x.0, rows * d);
                for i in 0..rows {
                    let yr = &y[i * d..(i + 1) * d];
                    let gr = &g[i * d..(i + 1) * d];
                    let mut dot = S::zero();
                    for j in 0..d {
                        dot = dot + yr[j] * gr[j];
                    }
                    let dr = &mut dx[i * d..(i + 1) * d];
                    for j in 0..d {
                        dr[j] = dr[j] + yr[j] * (gr[j] - dot);
                    }
                }
            },
        )
    }

    /// Layer normalization over the trailing axis with learnable gain/bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xsh = self.value(x).shape().to_vec();
        let d = *xsh.last().unwrap();
        let rows = self.value(x).numel() / d;
        for (v, name) in [(gain, "gain"), (bias, "bias")] {
            let sh = self.value(v).shape();
            if sh != [d] {
                return Err(Error::InvalidShape {
                    op: "layer_norm",
                    shape: sh.to_vec(),
                    detail: format!("{name} must have shape [{d}]"),
                });
            }
        }
        let inv_d: S = sc(1.0 / d as f64);
        let epss: S = sc(eps);
        let xd = self.data_of(x);
        let gd = self.data_of(gain);
        let bd = self.data_of(bias);
        let mut out = vec![S::zero(); xd.len()];
        let mut xhat = vec![S::zero(); xd.len()];
        let mut inv_std = vec![S::zero(); rows];
        for i in 0..rows {
            let row = &xd[i * d..(i + 1) * d];
            let mut mean = S::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean * inv_d;
            let mut var = S::zero();
            for &v in row {
                let c = v - mean;
                var = var + c * c;
            }
            var = var * inv_d;
            let istd = S::one() / (var + epss).sqrt();
            inv_std[i] = istd;
            for j in 0..d {
                let xh = (row[j] - mean) * istd;
                xhat[i * d + j] = xh;
                out[i * d + j] = xh * gd[j] + bd[j];
            }
        }
        let rg = self.require(x) || self.require(gain) || self.require(bias);
        Ok(
            self.push_op(Tensor::new(xsh, out)?, rg, move |nodes, g, grads| {
                if nodes[bias.0].requires_grad {
                    let db = acc(grads, bias.0, d);
                    for i in 0..rows {
                        for j in 0..d {
                            db[j] = db[j] + g[i * d + j];
                        }
                    }
                }
                if nodes[gain.0].requires_grad {
                    let dg = acc(grads, gain.0, d);
                    for i in 0..rows {
                        for j in 0..d {
                            dg[j] = dg[j] + g[i * d + j] * xhat[i * d + j];
                        }
                    }
                }
                if nodes[x.0].requires_grad {
                    let gd = nodes[gain.0].value.data();
                    let dx = acc(grads, x.0, rows * d);
                    let inv_dn: S = sc(1.0 / d as f64);
                    for i in 0..rows {
                        let istd = inv_std[i];
                        let xh = &xhat[i * d..(i + 1) * d];
                        let gr = &g[i * d..(i + 1) * d];
                        // gprime = dL/dxhat; two row means complete the formula
                        let mut mean_gp = S::zero();
                        let mut mean_gpx = S::zero();
                        for j in 0..d {
                            let gp = gr[j] * gd[j];
                            mean_gp = mean_gp + gp;
                            mean_gpx = mean_gpx + gp * xh[j];
                        }
                        mean_gp = mean_gp * inv_dn;
                        mean_gpx = mean_gpx * inv_dn;
                        let dr = &mut dx[i * d..(i + 1) * d];
                        for j in 0..d {
                            let gp = gr[j] * gd[j];
                            dr[j] = dr[j] + istd * (gp - mean_gp - xh[j] * mean_gpx);
                        }
                    }
                }
            }),
        )
    }

    /// Mean cross-entropy of `[R,V]` logits against integer targets, computed
    /// through log-sum-exp (never through a materialized softmax).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let lsh = self.value(logits).shape().to_vec();
        if lsh.len() != 2 {
            return Err(Error::InvalidShape {
                op: "cross_entropy",
                shape: lsh,
                detail: "logits must be [rows, vocab]".into(),
            });
        }
        let (rows, v) = (lsh[0], lsh[1]);
        if rows == 0 || v == 0 {
            return Err(Error::InvalidShape {
                op: "cross_entropy",
                shape: lsh,
                detail: "needs at least one row and one class".into(),
            });
        }
        if targets.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: lsh,
                rhs: vec![targets.len()],
            });
        }
        for &t in targets {
            if t as usize >= v {
                return Err(Error::Decoding { id: t, vocab: v });
            }
        }
        let xd = self.data_of(logits);
        // probs are saved for the backward pass
        let mut probs = vec![S::zero(); xd.len()];
        let mut loss = S::zero();
        for i in 0..rows {
            let row = &xd[i * v..(i + 1) * v];
            let mut mx = row[0];
            for &val in row {
                if val > mx {
                    mx = val;
                }
            }
            let prow = &mut probs[i * v..(i + 1) * v];
            let mut tot = S::zero();
            for j in 0..v {
                let e = (row[j] - mx).exp();
                prow[j] = e;
                tot = tot + e;
            }
            for p in prow.iter_mut() {
                *p = *p / tot;
            }
            let lse = mx + tot.ln();
            loss = loss + (lse - row[targets[i] as usize]);
        }
        loss = loss / sc(rows as f64);
        let targets_owned: Vec<u32> = targets.to_vec();
        let rg = self.require(logits);
        Ok(
            self.push_op(Tensor::scalar(loss), rg, move |_nodes, g, grads| {
                let go = g[0] / sc(rows as f64);
                let dx = acc(grads, logits.0, rows * v);
                for i in 0..rows {
                    let prow = &probs[i * v..(i + 1) * v];
                    let dr = &mut dx[i * v..(i + 1) * v];
                    let t = targets_owned[i] as usize;
                    for j in 0..v {
                        let indicator = if j == t { S::one() } else { S::zero() };
                        dr[j] = dr[j] + go * (prow[j] - indicator);
                    }
                }
            }),
        )
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}
