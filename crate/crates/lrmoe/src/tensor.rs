//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! Storage is a flat row-major `Vec<f32>`; shapes are explicit and there is
//! no implicit broadcasting (scalar-with-tensor excepted via `scale`).
//! Every differentiable operation records a backprop node holding its inputs
//! and a local-gradient closure; `Tensor::backward` walks the graph in
//! reverse topological order and accumulates `+=` into per-tensor grad
//! buffers. Callers zero grads between steps.
//!
//! Reductions (`sum_all`, `mean_all`, layer-norm moments) accumulate in f64
//! before narrowing back to f32.

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static MAC_COUNT: Cell<u64> = const { Cell::new(0) };
}

/// Run `f` without recording backprop nodes (inference mode).
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Reset the thread-local multiply-accumulate counter.
pub fn reset_mac_counter() {
    MAC_COUNT.with(|c| c.set(0));
}

/// Multiply-accumulates executed by matmul kernels on this thread since the
/// last reset. Used by dispatch-cost tests and to validate the cost model.
pub fn mac_count() -> u64 {
    MAC_COUNT.with(|c| c.get())
}

fn count_macs(n: usize) {
    MAC_COUNT.with(|c| c.set(c.get() + n as u64));
}

/// Backward rule: receives (output data, output grad) and accumulates into
/// the grads of the tensors it captured.
type BackwardFn = Box<dyn Fn(&[f32], &[f32])>;

struct Node {
    inputs: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: u64,
    dims: Vec<usize>,
    data: RefCell<Vec<f32>>,
    grad: RefCell<Option<Vec<f32>>>,
    node: Option<Node>,
}

/// Shared handle to a tensor; clones alias the same storage.
pub struct Tensor {
    inner: Rc<Inner>,
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.inner.data.borrow();
        let head: Vec<f32> = data.iter().take(8).copied().collect();
        write!(
            f,
            "Tensor{{dims: {:?}, data: {:?}{}}}",
            self.inner.dims,
            head,
            if data.len() > 8 { ", .." } else { "" }
        )
    }
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

fn make(dims: Vec<usize>, data: Vec<f32>, node: Option<Node>) -> Tensor {
    debug_assert_eq!(dims.iter().product::<usize>(), data.len());
    Tensor {
        inner: Rc::new(Inner {
            id: next_id(),
            dims,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            node,
        }),
    }
}

fn op(dims: Vec<usize>, data: Vec<f32>, inputs: Vec<Tensor>, backward: BackwardFn) -> Tensor {
    let node = if grad_enabled() {
        Some(Node { inputs, backward })
    } else {
        None
    };
    make(dims, data, node)
}

impl Tensor {
    pub fn from_vec(dims: Vec<usize>, data: Vec<f32>) -> Result<Tensor> {
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "from_vec",
                lhs: dims,
                rhs: vec![data.len()],
            });
        }
        Ok(make(dims, data, None))
    }

    pub fn zeros(dims: Vec<usize>) -> Tensor {
        let n = dims.iter().product();
        make(dims, vec![0.0; n], None)
    }

    pub fn full(dims: Vec<usize>, value: f32) -> Tensor {
        let n = dims.iter().product();
        make(dims, vec![value; n], None)
    }

    pub fn ones(dims: Vec<usize>) -> Tensor {
        Tensor::full(dims, 1.0)
    }

    /// Rank-0 scalar (empty dims, one element).
    pub fn scalar(value: f32) -> Tensor {
        make(vec![], vec![value], None)
    }

    /// Uniform init in [-bound, bound], drawn sequentially from `rng`.
    pub fn uniform(dims: Vec<usize>, bound: f32, rng: &mut impl Rng) -> Tensor {
        let n = dims.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        make(dims, data, None)
    }

    pub fn dims(&self) -> &[usize] {
        &self.inner.dims
    }

    pub fn numel(&self) -> usize {
        self.inner.data.borrow().len()
    }

    pub fn data(&self) -> Ref<'_, Vec<f32>> {
        self.inner.data.borrow()
    }

    /// Mutable access for in-place parameter updates. Must not be called
    /// while a forward graph referencing this tensor is still pending.
    pub fn data_mut(&self) -> RefMut<'_, Vec<f32>> {
        self.inner.data.borrow_mut()
    }

    pub fn item(&self) -> f32 {
        let data = self.inner.data.borrow();
        assert_eq!(data.len(), 1, "item() on non-scalar tensor");
        data[0]
    }

    /// Copy of the gradient buffer, if any accumulation happened.
    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        let mut g = self.inner.grad.borrow_mut();
        match g.as_mut() {
            Some(buf) => buf.fill(0.0),
            None => *g = Some(vec![0.0; self.numel()]),
        }
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, delta: &[f32]) {
        let mut g = self.inner.grad.borrow_mut();
        let buf = g.get_or_insert_with(|| vec![0.0; delta.len()]);
        debug_assert_eq!(buf.len(), delta.len());
        for (b, d) in buf.iter_mut().zip(delta) {
            *b += d;
        }
    }

    /// Scale the accumulated gradient in place (gradient clipping).
    pub fn scale_grad(&self, factor: f32) {
        if let Some(g) = self.inner.grad.borrow_mut().as_mut() {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }

    /// Detached copy: same values, no backprop history.
    pub fn detach(&self) -> Tensor {
        make(self.inner.dims.clone(), self.inner.data.borrow().clone(), None)
    }

    /// Reverse-mode sweep from a scalar loss. Populates grads on every
    /// reachable tensor; unreachable tensors are untouched.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward() needs a scalar loss, got dims {:?}",
                self.inner.dims
            )));
        }
        let order = topo_order(self);
        self.accumulate_grad(&[1.0]);
        for t in order.iter().rev() {
            let Some(node) = &t.inner.node else { continue };
            let grad = t.inner.grad.borrow().clone();
            let Some(grad) = grad else { continue };
            let data = t.inner.data.borrow();
            (node.backward)(&data, &grad);
        }
        Ok(())
    }
}

/// Iterative DFS post-order over the backprop graph (deterministic: follows
/// recorded input order).
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    // (tensor, next input index to visit)
    let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
    visited.insert(root.inner.id);
    while let Some((t, idx)) = stack.pop() {
        let inputs = t.inner.node.as_ref().map(|n| &n.inputs);
        match inputs {
            Some(inputs) if idx < inputs.len() => {
                let child = inputs[idx].clone();
                stack.push((t, idx + 1));
                if visited.insert(child.inner.id) {
                    stack.push((child, 0));
                }
            }
            _ => order.push(t),
        }
    }
    order
}

// ── matmul kernels ───────────────────────────────────────────────────

/// out += A[m×k] · B[k×n], row-major, ikj order.
pub(crate) fn mm_acc(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    count_macs(m * k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m×k] += C[m×n] · Bᵀ where B is [k×n].
fn mm_bt_acc(c: &[f32], b: &[f32], m: usize, n: usize, k: usize, out: &mut [f32]) {
    count_macs(m * n * k);
    for i in 0..m {
        let crow = &c[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (p, o) in orow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0f32;
            for (&cv, &bv) in crow.iter().zip(brow) {
                s += cv * bv;
            }
            *o += s;
        }
    }
}

/// out[k×n] += Aᵀ · C where A is [m×k], C is [m×n].
fn mm_at_acc(a: &[f32], c: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    count_macs(m * k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &cv) in orow.iter_mut().zip(crow) {
                *o += av * cv;
            }
        }
    }
}

fn dims2(t: &Tensor, op_name: &'static str) -> Result<(usize, usize)> {
    match t.dims() {
        [m, n] => Ok((*m, *n)),
        other => Err(Error::Shape {
            op: op_name,
            lhs: other.to_vec(),
            rhs: vec![],
        }),
    }
}

/// Number of rows when the tensor is viewed as rows of its last extent.
fn row_view(t: &Tensor) -> (usize, usize) {
    let width = t.dims().last().copied().unwrap_or(1).max(1);
    (t.numel() / width, width)
}

// ── differentiable operations ────────────────────────────────────────

/// C[m×n] = A[m×k] · B[k×n].
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, ka) = dims2(a, "matmul")?;
    let (kb, n) = dims2(b, "matmul")?;
    if ka != kb {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.dims().to_vec(),
            rhs: b.dims().to_vec(),
        });
    }
    let mut data = vec![0.0; m * n];
    mm_acc(&a.data(), &b.data(), m, ka, n, &mut data);
    let (ac, bc) = (a.clone(), b.clone());
    Ok(op(
        vec![m, n],
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |_, g| {
            let mut da = vec![0.0; m * ka];
            mm_bt_acc(g, &bc.data(), m, n, ka, &mut da);
            ac.accumulate_grad(&da);
            let mut db = vec![0.0; ka * n];
            mm_at_acc(&ac.data(), g, m, ka, n, &mut db);
            bc.accumulate_grad(&db);
        }),
    ))
}

/// Elementwise sum of two same-shape tensors.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::Shape {
            op: "add",
            lhs: a.dims().to_vec(),
            rhs: b.dims().to_vec(),
        });
    }
    let data = a.data().iter().zip(b.data().iter()).map(|(x, y)| x + y).collect();
    let (ac, bc) = (a.clone(), b.clone());
    Ok(op(
        a.dims().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |_, g| {
            ac.accumulate_grad(g);
            bc.accumulate_grad(g);
        }),
    ))
}

/// x[m×n] + row vector b[n], broadcast over rows.
pub fn add_bias(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, n) = dims2(x, "add_bias")?;
    if b.dims() != [n] {
        return Err(Error::Shape {
            op: "add_bias",
            lhs: x.dims().to_vec(),
            rhs: b.dims().to_vec(),
        });
    }
    let bd = b.data();
    let data = x
        .data()
        .chunks_exact(n)
        .flat_map(|row| row.iter().zip(bd.iter()).map(|(v, bv)| v + bv).collect::<Vec<_>>())
        .collect();
    drop(bd);
    let (xc, bc) = (x.clone(), b.clone());
    Ok(op(
        vec![m, n],
        data,
        vec![x.clone(), b.clone()],
        Box::new(move |_, g| {
            xc.accumulate_grad(g);
            let mut db = vec![0.0; n];
            for row in g.chunks_exact(n) {
                for (d, v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
            bc.accumulate_grad(&db);
        }),
    ))
}

/// Elementwise product of two same-shape tensors.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::Shape {
            op: "mul",
            lhs: a.dims().to_vec(),
            rhs: b.dims().to_vec(),
        });
    }
    let data = a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).collect();
    let (ac, bc) = (a.clone(), b.clone());
    Ok(op(
        a.dims().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |_, g| {
            let da: Vec<f32> = g.iter().zip(bc.data().iter()).map(|(gv, bv)| gv * bv).collect();
            ac.accumulate_grad(&da);
            let db: Vec<f32> = g.iter().zip(ac.data().iter()).map(|(gv, av)| gv * av).collect();
            bc.accumulate_grad(&db);
        }),
    ))
}

/// Scalar-with-tensor product (the one permitted broadcast).
pub fn scale(x: &Tensor, factor: f32) -> Tensor {
    let data = x.data().iter().map(|v| v * factor).collect();
    let xc = x.clone();
    op(
        x.dims().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |_, g| {
            let dx: Vec<f32> = g.iter().map(|v| v * factor).collect();
            xc.accumulate_grad(&dx);
        }),
    )
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|v| v.max(0.0)).collect();
    let xc = x.clone();
    op(
        x.dims().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |_, g| {
            let dx: Vec<f32> = xc
                .data()
                .iter()
                .zip(g)
                .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                .collect();
            xc.accumulate_grad(&dx);
        }),
    )
}

fn softmax_row(row: &[f32], out: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum += e as f64;
    }
    let inv = (1.0 / sum) as f32;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// Row-wise softmax over the last axis, max-subtracted for stability.
pub fn softmax(x: &Tensor) -> Tensor {
    let (rows, width) = row_view(x);
    let xd = x.data();
    let mut data = vec![0.0; xd.len()];
    for (src, dst) in xd.chunks_exact(width).zip(data.chunks_exact_mut(width)) {
        softmax_row(src, dst);
    }
    drop(xd);
    let xc = x.clone();
    op(
        x.dims().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |out, g| {
            // dx = y * (g - sum(g*y)) per row
            let mut dx = vec![0.0; out.len()];
            for r in 0..rows {
                let y = &out[r * width..(r + 1) * width];
                let gr = &g[r * width..(r + 1) * width];
                let dot: f64 = y.iter().zip(gr).map(|(&yv, &gv)| (yv * gv) as f64).sum();
                for ((d, &yv), &gv) in dx[r * width..(r + 1) * width].iter_mut().zip(y).zip(gr) {
                    *d = yv * (gv - dot as f32);
                }
            }
            xc.accumulate_grad(&dx);
        }),
    )
}

/// Row-wise log-softmax over the last axis.
pub fn log_softmax(x: &Tensor) -> Tensor {
    let (rows, width) = row_view(x);
    let xd = x.data();
    let mut data = vec![0.0; xd.len()];
    for (src, dst) in xd.chunks_exact(width).zip(data.chunks_exact_mut(width)) {
        let max = src.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let lse: f64 = src.iter().map(|&v| ((v - max) as f64).exp()).sum();
        let lse = max as f64 + lse.ln();
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = (v as f64 - lse) as f32;
        }
    }
    drop(xd);
    let xc = x.clone();
    op(
        x.dims().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |out, g| {
            // dx = g - softmax(x) * sum(g) per row; softmax = exp(out)
            let mut dx = vec![0.0; out.len()];
            for r in 0..rows {
                let y = &out[r * width..(r + 1) * width];
                let gr = &g[r * width..(r + 1) * width];
                let gsum: f64 = gr.iter().map(|&v| v as f64).sum();
                for ((d, &lv), &gv) in dx[r * width..(r + 1) * width].iter_mut().zip(y).zip(gr) {
                    *d = gv - lv.exp() * gsum as f32;
                }
            }
            xc.accumulate_grad(&dx);
        }),
    )
}

/// Row-wise layer normalization with affine parameters.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let (rows, width) = row_view(x);
    if gamma.dims() != [width] || beta.dims() != [width] {
        return Err(Error::Shape {
            op: "layer_norm",
            lhs: x.dims().to_vec(),
            rhs: gamma.dims().to_vec(),
        });
    }
    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    let mut data = vec![0.0; xd.len()];
    // normalized values saved for backward
    let mut xhat = vec![0.0f32; xd.len()];
    let mut inv_std = vec![0.0f32; rows];
    for r in 0..rows {
        let src = &xd[r * width..(r + 1) * width];
        let mean = src.iter().map(|&v| v as f64).sum::<f64>() / width as f64;
        let var = src.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / width as f64;
        let istd = 1.0 / (var + eps as f64).sqrt();
        inv_std[r] = istd as f32;
        for c in 0..width {
            let h = ((xd[r * width + c] as f64 - mean) * istd) as f32;
            xhat[r * width + c] = h;
            data[r * width + c] = h * gd[c] + bd[c];
        }
    }
    drop(xd);
    drop(gd);
    drop(bd);
    let (xc, gc, bc) = (x.clone(), gamma.clone(), beta.clone());
    Ok(op(
        x.dims().to_vec(),
        data,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |_, g| {
            let gd = gc.data();
            let mut dx = vec![0.0; g.len()];
            let mut dgamma = vec![0.0; width];
            let mut dbeta = vec![0.0; width];
            for r in 0..rows {
                let gr = &g[r * width..(r + 1) * width];
                let hr = &xhat[r * width..(r + 1) * width];
                let mut sum_gy = 0.0f64;
                let mut sum_gyh = 0.0f64;
                for c in 0..width {
                    let gy = (gr[c] * gd[c]) as f64;
                    sum_gy += gy;
                    sum_gyh += gy * hr[c] as f64;
                    dgamma[c] += gr[c] * hr[c];
                    dbeta[c] += gr[c];
                }
                let mean_gy = sum_gy / width as f64;
                let mean_gyh = sum_gyh / width as f64;
                for c in 0..width {
                    let gy = (gr[c] * gd[c]) as f64;
                    dx[r * width + c] =
                        (inv_std[r] as f64 * (gy - mean_gy - hr[c] as f64 * mean_gyh)) as f32;
                }
            }
            drop(gd);
            xc.accumulate_grad(&dx);
            gc.accumulate_grad(&dgamma);
            bc.accumulate_grad(&dbeta);
        }),
    ))
}

/// 2-D transpose.
pub fn transpose(x: &Tensor) -> Result<Tensor> {
    let (m, n) = dims2(x, "transpose")?;
    let xd = x.data();
    let mut data = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            data[j * m + i] = xd[i * n + j];
        }
    }
    drop(xd);
    let xc = x.clone();
    Ok(op(
        vec![n, m],
        data,
        vec![x.clone()],
        Box::new(move |_, g| {
            let mut dx = vec![0.0; m * n];
            for j in 0..n {
                for i in 0..m {
                    dx[i * n + j] = g[j * m + i];
                }
            }
            xc.accumulate_grad(&dx);
        }),
    ))
}

/// Columns [start, start+len) of a matrix.
pub fn slice_cols(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (m, n) = dims2(x, "slice_cols")?;
    if start + len > n {
        return Err(Error::Shape {
            op: "slice_cols",
            lhs: x.dims().to_vec(),
            rhs: vec![start, len],
        });
    }
    let xd = x.data();
    let mut data = Vec::with_capacity(m * len);
    for r in 0..m {
        data.extend_from_slice(&xd[r * n + start..r * n + start + len]);
    }
    drop(xd);
    let xc = x.clone();
    Ok(op(
        vec![m, len],
        data,
        vec![x.clone()],
        Box::new(move |_, g| {
            let mut dx = vec![0.0; m * n];
            for r in 0..m {
                dx[r * n + start..r * n + start + len]
                    .copy_from_slice(&g[r * len..(r + 1) * len]);
            }
            xc.accumulate_grad(&dx);
        }),
    ))
}

/// Column-wise concatenation of matrices with equal row counts.
pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::Usage("concat_cols on empty list".into()));
    }
    let (m, _) = dims2(&parts[0], "concat_cols")?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (pm, pn) = dims2(p, "concat_cols")?;
        if pm != m {
            return Err(Error::Shape {
                op: "concat_cols",
                lhs: parts[0].dims().to_vec(),
                rhs: p.dims().to_vec(),
            });
        }
        widths.push(pn);
    }
    let n: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(m * n);
    for r in 0..m {
        for (p, &w) in parts.iter().zip(&widths) {
            let pd = p.data();
            data.extend_from_slice(&pd[r * w..(r + 1) * w]);
        }
    }
    let captured: Vec<Tensor> = parts.to_vec();
    let widths_c = widths.clone();
    Ok(op(
        vec![m, n],
        data,
        parts.to_vec(),
        Box::new(move |_, g| {
            let mut offset = 0;
            for (p, &w) in captured.iter().zip(&widths_c) {
                let mut dp = vec![0.0; m * w];
                for r in 0..m {
                    dp[r * w..(r + 1) * w].copy_from_slice(&g[r * n + offset..r * n + offset + w]);
                }
                p.accumulate_grad(&dp);
                offset += w;
            }
        }),
    ))
}

/// Rows of `x` selected by `indices` (repeats allowed).
pub fn gather_rows(x: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let (m, n) = dims2(x, "gather_rows")?;
    if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
        return Err(Error::Internal(format!(
            "gather_rows index {bad} out of range for {m} rows"
        )));
    }
    let xd = x.data();
    let mut data = Vec::with_capacity(indices.len() * n);
    for &i in indices {
        data.extend_from_slice(&xd[i * n..(i + 1) * n]);
    }
    drop(xd);
    let xc = x.clone();
    let idx = indices.to_vec();
    Ok(op(
        vec![indices.len(), n],
        data,
        vec![x.clone()],
        Box::new(move |_, g| {
            let mut dx = vec![0.0; m * n];
            for (r, &i) in idx.iter().enumerate() {
                for c in 0..n {
                    dx[i * n + c] += g[r * n + c];
                }
            }
            xc.accumulate_grad(&dx);
        }),
    ))
}

/// Rows of `x` scattered into a zero matrix of `out_rows` rows; duplicate
/// indices accumulate.
pub fn scatter_rows(x: &Tensor, indices: &[usize], out_rows: usize) -> Result<Tensor> {
    let (m, n) = dims2(x, "scatter_rows")?;
    if indices.len() != m {
        return Err(Error::Shape {
            op: "scatter_rows",
            lhs: x.dims().to_vec(),
            rhs: vec![indices.len()],
        });
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= out_rows) {
        return Err(Error::Internal(format!(
            "scatter_rows index {bad} out of range for {out_rows} rows"
        )));
    }
    let xd = x.data();
    let mut data = vec![0.0; out_rows * n];
    for (r, &i) in indices.iter().enumerate() {
        for c in 0..n {
            data[i * n + c] += xd[r * n + c];
        }
    }
    drop(xd);
    let xc = x.clone();
    let idx = indices.to_vec();
    Ok(op(
        vec![out_rows, n],
        data,
        vec![x.clone()],
        Box::new(move |_, g| {
            let mut dx = vec![0.0; m * n];
            for (r, &i) in idx.iter().enumerate() {
                dx[r * n..(r + 1) * n].copy_from_slice(&g[i * n..(i + 1) * n]);
            }
            xc.accumulate_grad(&dx);
        }),
    ))
}

/// Column means: [m×n] -> [n].
pub fn mean_rows(x: &Tensor) -> Result<Tensor> {
    let (m, n) = dims2(x, "mean_rows")?;
    let xd = x.data();
    let mut acc = vec![0.0f64; n];
    for row in xd.chunks_exact(n) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v as f64;
        }
    }
    let data: Vec<f32> = acc.iter().map(|&a| (a / m as f64) as f32).collect();
    drop(xd);
    let xc = x.clone();
    Ok(op(
        vec![n],
        data,
        vec![x.clone()],
        Box::new(move |_, g| {
            let inv = 1.0 / m as f32;
            let mut dx = vec![0.0; m * n];
            for r in 0..m {
                for c in 0..n {
                    dx[r * n + c] = g[c] * inv;
                }
            }
            xc.accumulate_grad(&dx);
        }),
    ))
}

/// Sum of all elements as a rank-0 scalar (f64 accumulation).
pub fn sum_all(x: &Tensor) -> Tensor {
    let s: f64 = x.data().iter().map(|&v| v as f64).sum();
    let xc = x.clone();
    let n = x.numel();
    op(
        vec![],
        vec![s as f32],
        vec![x.clone()],
        Box::new(move |_, g| {
            let dx = vec![g[0]; n];
            xc.accumulate_grad(&dx);
        }),
    )
}

/// Mean of all elements as a rank-0 scalar (f64 accumulation).
pub fn mean_all(x: &Tensor) -> Tensor {
    let n = x.numel();
    let s: f64 = x.data().iter().map(|&v| v as f64).sum();
    let xc = x.clone();
    op(
        vec![],
        vec![(s / n as f64) as f32],
        vec![x.clone()],
        Box::new(move |_, g| {
            let dx = vec![g[0] / n as f32; n];
            xc.accumulate_grad(&dx);
        }),
    )
}

/// Single element by flat index, as a rank-0 scalar.
pub fn pick(x: &Tensor, index: usize) -> Result<Tensor> {
    if index >= x.numel() {
        return Err(Error::Usage(format!(
            "pick index {index} out of range for {} elements",
            x.numel()
        )));
    }
    let v = x.data()[index];
    let xc = x.clone();
    let n = x.numel();
    Ok(op(
        vec![],
        vec![v],
        vec![x.clone()],
        Box::new(move |_, g| {
            let mut dx = vec![0.0; n];
            dx[index] = g[0];
            xc.accumulate_grad(&dx);
        }),
    ))
}

/// One element per row: out[r] = x[r, cols[r]], shape [m×1].
pub fn pick_per_row(x: &Tensor, cols: &[usize]) -> Result<Tensor> {
    let (m, n) = dims2(x, "pick_per_row")?;
    if cols.len() != m {
        return Err(Error::Shape {
            op: "pick_per_row",
            lhs: x.dims().to_vec(),
            rhs: vec![cols.len()],
        });
    }
    if let Some(&bad) = cols.iter().find(|&&c| c >= n) {
        return Err(Error::Internal(format!(
            "pick_per_row column {bad} out of range for width {n}"
        )));
    }
    let xd = x.data();
    let data: Vec<f32> = cols.iter().enumerate().map(|(r, &c)| xd[r * n + c]).collect();
    drop(xd);
    let xc = x.clone();
    let cols_c = cols.to_vec();
    Ok(op(
        vec![m, 1],
        data,
        vec![x.clone()],
        Box::new(move |_, g| {
            let mut dx = vec![0.0; m * n];
            for (r, &c) in cols_c.iter().enumerate() {
                dx[r * n + c] = g[r];
            }
            xc.accumulate_grad(&dx);
        }),
    ))
}

/// Row scaling: out[r] = s[r] * x[r] with s shaped [m×1].
pub fn scale_rows(x: &Tensor, s: &Tensor) -> Result<Tensor> {
    let (m, n) = dims2(x, "scale_rows")?;
    if s.dims() != [m, 1] {
        return Err(Error::Shape {
            op: "scale_rows",
            lhs: x.dims().to_vec(),
            rhs: s.dims().to_vec(),
        });
    }
    let sd = s.data();
    let data: Vec<f32> = x
        .data()
        .chunks_exact(n)
        .enumerate()
        .flat_map(|(r, row)| row.iter().map(|v| v * sd[r]).collect::<Vec<_>>())
        .collect();
    drop(sd);
    let (xc, sc) = (x.clone(), s.clone());
    Ok(op(
        vec![m, n],
        data,
        vec![x.clone(), s.clone()],
        Box::new(move |_, g| {
            let sd = sc.data();
            let dx: Vec<f32> = g
                .chunks_exact(n)
                .enumerate()
                .flat_map(|(r, row)| row.iter().map(|v| v * sd[r]).collect::<Vec<_>>())
                .collect();
            drop(sd);
            xc.accumulate_grad(&dx);
            let xd = xc.data();
            let ds: Vec<f32> = (0..m)
                .map(|r| {
                    (0..n)
                        .map(|c| (xd[r * n + c] * g[r * n + c]) as f64)
                        .sum::<f64>() as f32
                })
                .collect();
            drop(xd);
            sc.accumulate_grad(&ds);
        }),
    ))
}

/// Replace entries where `mask` is true with `value`; gradient is zero there.
pub fn masked_fill(x: &Tensor, mask: &[bool], value: f32) -> Result<Tensor> {
    if mask.len() != x.numel() {
        return Err(Error::Shape {
            op: "masked_fill",
            lhs: x.dims().to_vec(),
            rhs: vec![mask.len()],
        });
    }
    let data = x
        .data()
        .iter()
        .zip(mask)
        .map(|(&v, &m)| if m { value } else { v })
        .collect();
    let xc = x.clone();
    let mask_c = mask.to_vec();
    Ok(op(
        x.dims().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |_, g| {
            let dx: Vec<f32> = g
                .iter()
                .zip(&mask_c)
                .map(|(&gv, &m)| if m { 0.0 } else { gv })
                .collect();
            xc.accumulate_grad(&dx);
        }),
    ))
}

/// View with new dims covering the same elements.
pub fn reshape(x: &Tensor, dims: Vec<usize>) -> Result<Tensor> {
    let n: usize = dims.iter().product();
    if n != x.numel() {
        return Err(Error::Shape {
            op: "reshape",
            lhs: x.dims().to_vec(),
            rhs: dims,
        });
    }
    let data = x.data().clone();
    let xc = x.clone();
    Ok(op(
        dims,
        data,
        vec![x.clone()],
        Box::new(move |_, g| {
            xc.accumulate_grad(g);
        }),
    ))
}

/// Patch extraction for a strided 1-D convolution over time.
/// x is [T×C]; output row t holds the k input frames centered on stride*t,
/// zero-padded at the borders: [T_out × (k·C)].
pub fn im2col_1d(x: &Tensor, kernel: usize, stride: usize, pad: usize) -> Result<Tensor> {
    let (t_in, c) = dims2(x, "im2col_1d")?;
    let t_out = (t_in + 2 * pad - kernel) / stride + 1;
    let xd = x.data();
    let mut data = vec![0.0; t_out * kernel * c];
    for t in 0..t_out {
        for j in 0..kernel {
            let src = (t * stride + j) as isize - pad as isize;
            if src < 0 || src >= t_in as isize {
                continue;
            }
            let src = src as usize;
            data[t * kernel * c + j * c..t * kernel * c + (j + 1) * c]
                .copy_from_slice(&xd[src * c..(src + 1) * c]);
        }
    }
    drop(xd);
    let xc = x.clone();
    Ok(op(
        vec![t_out, kernel * c],
        data,
        vec![x.clone()],
        Box::new(move |_, g| {
            let mut dx = vec![0.0; t_in * c];
            for t in 0..t_out {
                for j in 0..kernel {
                    let src = (t * stride + j) as isize - pad as isize;
                    if src < 0 || src >= t_in as isize {
                        continue;
                    }
                    let src = src as usize;
                    for ch in 0..c {
                        dx[src * c + ch] += g[t * kernel * c + j * c + ch];
                    }
                }
            }
            xc.accumulate_grad(&dx);
        }),
    ))
}

/// Patch extraction for a strided 3×3-style 2-D convolution.
/// x is [H × (W·C)] (row-major over height, then width, channels fastest);
/// output is [(H_out·W_out) × (k·k·C)].
pub fn im2col_2d(x: &Tensor, width: usize, channels: usize, kernel: usize, stride: usize, pad: usize) -> Result<Tensor> {
    let (h_in, row_width) = dims2(x, "im2col_2d")?;
    if row_width != width * channels {
        return Err(Error::Shape {
            op: "im2col_2d",
            lhs: x.dims().to_vec(),
            rhs: vec![width, channels],
        });
    }
    let h_out = (h_in + 2 * pad - kernel) / stride + 1;
    let w_out = (width + 2 * pad - kernel) / stride + 1;
    let patch = kernel * kernel * channels;
    let xd = x.data();
    let mut data = vec![0.0; h_out * w_out * patch];
    let write_or_skip = |data: &mut [f32], row: usize, h: usize, w: usize| {
        for kh in 0..kernel {
            let sh = (h * stride + kh) as isize - pad as isize;
            if sh < 0 || sh >= h_in as isize {
                continue;
            }
            for kw in 0..kernel {
                let sw = (w * stride + kw) as isize - pad as isize;
                if sw < 0 || sw >= width as isize {
                    continue;
                }
                let src = sh as usize * row_width + sw as usize * channels;
                let dst = row * patch + (kh * kernel + kw) * channels;
                data[dst..dst + channels].copy_from_slice(&xd[src..src + channels]);
            }
        }
    };
    for h in 0..h_out {
        for w in 0..w_out {
            write_or_skip(&mut data, h * w_out + w, h, w);
        }
    }
    drop(xd);
    let xc = x.clone();
    Ok(op(
        vec![h_out * w_out, patch],
        data,
        vec![x.clone()],
        Box::new(move |_, g| {
            let mut dx = vec![0.0; h_in * row_width];
            for h in 0..h_out {
                for w in 0..w_out {
                    let row = h * w_out + w;
                    for kh in 0..kernel {
                        let sh = (h * stride + kh) as isize - pad as isize;
                        if sh < 0 || sh >= h_in as isize {
                            continue;
                        }
                        for kw in 0..kernel {
                            let sw = (w * stride + kw) as isize - pad as isize;
                            if sw < 0 || sw >= width as isize {
                                continue;
                            }
                            let src = sh as usize * row_width + sw as usize * channels;
                            let dst = row * patch + (kh * kernel + kw) * channels;
                            for ch in 0..channels {
                                dx[src + ch] += g[dst + ch];
                            }
                        }
                    }
                }
            }
            xc.accumulate_grad(&dx);
        }),
    ))
}

/// Attach a precomputed local gradient to a scalar produced outside the op
/// set (used by the CTC loss, whose gradient comes from its own dynamic
/// program).
pub fn scalar_with_grad(value: f32, input: &Tensor, local_grad: Vec<f32>) -> Tensor {
    let xc = input.clone();
    op(
        vec![],
        vec![value],
        vec![input.clone()],
        Box::new(move |_, g| {
            let dx: Vec<f32> = local_grad.iter().map(|v| v * g[0]).collect();
            xc.accumulate_grad(&dx);
        }),
    )
}
