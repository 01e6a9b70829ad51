//! Tape-based reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Operations record themselves on a [`Tape`] during the forward pass;
//! [`Tape::backward`] walks the recorded nodes in reverse creation order
//! and accumulates gradients. Node handles ([`Tx`]) are `Copy` so forward
//! code reads like plain math:
//!
//! ```
//! use stochdiff::tape::Tape;
//! use stochdiff::tensor::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::row(&[3.0]));
//! let y = x.mul(x).sum(); // y = x²
//! let grads = tape.backward(y);
//! assert_eq!(grads.get(x).unwrap().data()[0], 6.0);
//! ```
//!
//! Shape agreement inside the graph is a programming invariant, so the
//! ops assert; fallible validation belongs to the public wrappers in
//! [`crate::nn`].

use std::cell::RefCell;

use crate::tensor::Tensor;

type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    back: Option<BackwardFn>,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a tensor recorded on a tape.
#[derive(Clone, Copy)]
pub struct Tx<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients produced by [`Tape::backward`], indexed by node handle.
pub struct Grads {
    by_node: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, x: Tx<'_>) -> Option<&Tensor> {
        self.by_node.get(x.id).and_then(|g| g.as_ref())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, parents: Vec<usize>, back: Option<BackwardFn>) -> Tx<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            parents,
            back,
        });
        Tx { tape: self, id }
    }

    /// Records an input node. Gradients are accumulated for leaves and
    /// can be read back after [`Tape::backward`].
    pub fn leaf(&self, value: Tensor) -> Tx<'_> {
        self.push(value, vec![], None)
    }

    /// Alias of [`Tape::leaf`] for values that are constants of the
    /// surrounding computation; the gradient is simply never read.
    pub fn constant(&self, value: Tensor) -> Tx<'_> {
        self.leaf(value)
    }

    /// Reverse pass from a one-element root node.
    pub fn backward(&self, root: Tx<'_>) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.id].value.len(),
            1,
            "backward root must be a scalar"
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root.id] = Some(Tensor::ones(nodes[root.id].value.shape()));

        for id in (0..=root.id).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if let Some(back) = &node.back {
                let parent_vals: Vec<&Tensor> =
                    node.parents.iter().map(|&p| &nodes[p].value).collect();
                let pgrads = back(&gout, &parent_vals, &node.value);
                assert_eq!(pgrads.len(), node.parents.len());
                for (&p, pg) in node.parents.iter().zip(pgrads) {
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            grads[id] = Some(gout);
        }
        Grads { by_node: grads }
    }
}

fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        for l in 0..k {
            let aval = ad[i * k + l];
            if aval == 0.0 {
                continue;
            }
            let brow = &bd[l * n..(l + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aval * bv;
            }
        }
    }
    Tensor::matrix(m, n, out).unwrap()
}

/// A · Bᵀ without materializing the transpose.
fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.cols());
    let (n, k2) = (b.rows(), b.cols());
    assert_eq!(k, k2, "matmul_nt inner dims {k} vs {k2}");
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &bd[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    Tensor::matrix(m, n, out).unwrap()
}

/// Aᵀ · B without materializing the transpose.
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, m) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    assert_eq!(k, k2, "matmul_tn inner dims {k} vs {k2}");
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    for l in 0..k {
        let arow = &ad[l * m..(l + 1) * m];
        let brow = &bd[l * n..(l + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(m, n, out).unwrap()
}

fn transpose_raw(a: &Tensor) -> Tensor {
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor::matrix(n, m, out).unwrap()
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'t> Tx<'t> {
    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    fn unary(self, forward: impl Fn(f64) -> f64, dydx: impl Fn(f64, f64) -> f64 + 'static) -> Self {
        let value = self.value().map(forward);
        self.tape.push(
            value,
            vec![self.id],
            Some(Box::new(move |g, inputs, out| {
                let x = inputs[0];
                let mut d = g.clone();
                for ((dv, &xv), &ov) in d.data_mut().iter_mut().zip(x.data()).zip(out.data()) {
                    *dv *= dydx(xv, ov);
                }
                vec![d]
            })),
        )
    }

    pub fn matmul(self, rhs: Tx<'t>) -> Self {
        let value = {
            let nodes = self.tape.nodes.borrow();
            matmul_raw(&nodes[self.id].value, &nodes[rhs.id].value)
        };
        self.tape.push(
            value,
            vec![self.id, rhs.id],
            Some(Box::new(|g, inputs, _| {
                vec![matmul_nt(g, inputs[1]), matmul_tn(inputs[0], g)]
            })),
        )
    }

    pub fn add(self, rhs: Tx<'t>) -> Self {
        let mut value = self.value();
        value.add_assign(&rhs.value());
        self.tape.push(
            value,
            vec![self.id, rhs.id],
            Some(Box::new(|g, _, _| vec![g.clone(), g.clone()])),
        )
    }

    pub fn sub(self, rhs: Tx<'t>) -> Self {
        let a = self.value();
        let b = rhs.value();
        assert_eq!(a.shape(), b.shape(), "sub shape mismatch");
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
        let value = Tensor::new(a.shape().to_vec(), data).unwrap();
        self.tape.push(
            value,
            vec![self.id, rhs.id],
            Some(Box::new(|g, _, _| {
                let mut neg = g.clone();
                neg.scale_assign(-1.0);
                vec![g.clone(), neg]
            })),
        )
    }

    pub fn mul(self, rhs: Tx<'t>) -> Self {
        let a = self.value();
        let b = rhs.value();
        assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(a.shape().to_vec(), data).unwrap();
        self.tape.push(
            value,
            vec![self.id, rhs.id],
            Some(Box::new(|g, inputs, _| {
                let (a, b) = (inputs[0], inputs[1]);
                let mut da = g.clone();
                for (d, &bv) in da.data_mut().iter_mut().zip(b.data()) {
                    *d *= bv;
                }
                let mut db = g.clone();
                for (d, &av) in db.data_mut().iter_mut().zip(a.data()) {
                    *d *= av;
                }
                vec![da, db]
            })),
        )
    }

    pub fn div(self, rhs: Tx<'t>) -> Self {
        let a = self.value();
        let b = rhs.value();
        assert_eq!(a.shape(), b.shape(), "div shape mismatch");
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x / y).collect();
        let value = Tensor::new(a.shape().to_vec(), data).unwrap();
        self.tape.push(
            value,
            vec![self.id, rhs.id],
            Some(Box::new(|g, inputs, _| {
                let (a, b) = (inputs[0], inputs[1]);
                let mut da = g.clone();
                for (d, &bv) in da.data_mut().iter_mut().zip(b.data()) {
                    *d /= bv;
                }
                let mut db = g.clone();
                for ((d, &av), &bv) in db.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
                    *d *= -av / (bv * bv);
                }
                vec![da, db]
            })),
        )
    }

    pub fn neg(self) -> Self {
        self.unary(|x| -x, |_, _| -1.0)
    }

    pub fn scale(self, c: f64) -> Self {
        self.unary(move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Self {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    pub fn tanh(self) -> Self {
        self.unary(|x| x.tanh(), |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(self) -> Self {
        self.unary(stable_sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn exp(self) -> Self {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn ln(self) -> Self {
        self.unary(|x| x.ln(), |x, _| 1.0 / x)
    }

    pub fn sqrt(self) -> Self {
        self.unary(|x| x.sqrt(), |_, y| 0.5 / y)
    }

    pub fn softplus(self) -> Self {
        self.unary(stable_softplus, |x, _| stable_sigmoid(x))
    }

    pub fn relu(self) -> Self {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Elementwise `max(x, c)`; the gradient is zero where clamping binds.
    pub fn clamp_min(self, c: f64) -> Self {
        self.unary(move |x| x.max(c), move |x, _| if x > c { 1.0 } else { 0.0 })
    }

    pub fn sum(self) -> Self {
        let total: f64 = self.value().data().iter().sum();
        self.tape.push(
            Tensor::scalar(total),
            vec![self.id],
            Some(Box::new(|g, inputs, _| {
                let mut d = Tensor::ones(inputs[0].shape());
                d.scale_assign(g.item());
                vec![d]
            })),
        )
    }

    pub fn mean(self) -> Self {
        let v = self.value();
        let n = v.len() as f64;
        let total: f64 = v.data().iter().sum();
        self.tape.push(
            Tensor::scalar(total / n),
            vec![self.id],
            Some(Box::new(move |g, inputs, _| {
                let mut d = Tensor::ones(inputs[0].shape());
                d.scale_assign(g.item() / n);
                vec![d]
            })),
        )
    }

    /// Row-wise softmax with the usual max-shift for stability.
    pub fn softmax_rows(self) -> Self {
        let x = self.value();
        let (m, n) = (x.rows(), x.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &x.data()[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                out[i * n + j] = e;
                denom += e;
            }
            for j in 0..n {
                out[i * n + j] /= denom;
            }
        }
        self.tape.push(
            Tensor::matrix(m, n, out).unwrap(),
            vec![self.id],
            Some(Box::new(|g, _, out| {
                let (m, n) = (out.rows(), out.cols());
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    let y = &out.data()[i * n..(i + 1) * n];
                    let gi = &g.data()[i * n..(i + 1) * n];
                    let dot: f64 = y.iter().zip(gi).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        d[i * n + j] = y[j] * (gi[j] - dot);
                    }
                }
                vec![Tensor::matrix(m, n, d).unwrap()]
            })),
        )
    }

    pub fn transpose(self) -> Self {
        let value = transpose_raw(&self.value());
        self.tape.push(
            value,
            vec![self.id],
            Some(Box::new(|g, _, _| vec![transpose_raw(g)])),
        )
    }

    /// Adds a 1×n bias row to every row of an m×n matrix.
    pub fn add_row(self, bias: Tx<'t>) -> Self {
        let x = self.value();
        let b = bias.value();
        let (m, n) = (x.rows(), x.cols());
        assert_eq!(b.shape(), [1, n], "add_row bias must be 1x{n}");
        let mut data = x.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += b.data()[j];
            }
        }
        self.tape.push(
            Tensor::matrix(m, n, data).unwrap(),
            vec![self.id, bias.id],
            Some(Box::new(|g, _, _| {
                let (m, n) = (g.rows(), g.cols());
                let mut db = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        db[j] += g.data()[i * n + j];
                    }
                }
                vec![g.clone(), Tensor::matrix(1, n, db).unwrap()]
            })),
        )
    }

    /// Scales row i of an m×n matrix by the i-th entry of an m×1 column.
    pub fn rows_scale(self, col: Tx<'t>) -> Self {
        let x = self.value();
        let v = col.value();
        let (m, n) = (x.rows(), x.cols());
        assert_eq!(v.shape(), [m, 1], "rows_scale column must be {m}x1");
        let mut data = x.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] *= v.data()[i];
            }
        }
        self.tape.push(
            Tensor::matrix(m, n, data).unwrap(),
            vec![self.id, col.id],
            Some(Box::new(|g, inputs, _| {
                let (x, v) = (inputs[0], inputs[1]);
                let (m, n) = (x.rows(), x.cols());
                let mut dx = g.clone();
                let mut dv = vec![0.0; m];
                for i in 0..m {
                    for j in 0..n {
                        dx.data_mut()[i * n + j] *= v.data()[i];
                        dv[i] += g.data()[i * n + j] * x.data()[i * n + j];
                    }
                }
                vec![dx, Tensor::matrix(m, 1, dv).unwrap()]
            })),
        )
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Self {
        let x = self.value();
        let (m, n) = (x.rows(), x.cols());
        assert!(start < end && end <= n, "slice_cols {start}..{end} of {n}");
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&x.data()[i * n + start..i * n + end]);
        }
        self.tape.push(
            Tensor::matrix(m, w, data).unwrap(),
            vec![self.id],
            Some(Box::new(move |g, inputs, _| {
                let (m, n) = (inputs[0].rows(), inputs[0].cols());
                let w = end - start;
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    d[i * n + start..i * n + end].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                vec![Tensor::matrix(m, n, d).unwrap()]
            })),
        )
    }

    /// Reinterprets the value under a new shape of equal length.
    pub fn reshape(self, shape: Vec<usize>) -> Self {
        let value = self.value().reshaped(shape).expect("reshape length mismatch");
        self.tape.push(
            value,
            vec![self.id],
            Some(Box::new(|g, inputs, _| {
                vec![g.reshaped(inputs[0].shape().to_vec()).unwrap()]
            })),
        )
    }
}

/// Concatenates matrices with equal row counts along the column axis.
pub fn concat_cols<'t>(tape: &'t Tape, parts: &[Tx<'t>]) -> Tx<'t> {
    assert!(!parts.is_empty(), "concat_cols of nothing");
    let values: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
    let m = values[0].rows();
    let widths: Vec<usize> = values
        .iter()
        .map(|v| {
            assert_eq!(v.rows(), m, "concat_cols row mismatch");
            v.cols()
        })
        .collect();
    let total: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(m * total);
    for i in 0..m {
        for v in &values {
            let n = v.cols();
            data.extend_from_slice(&v.data()[i * n..(i + 1) * n]);
        }
    }
    let widths_back = widths.clone();
    tape.push(
        Tensor::matrix(m, total, data).unwrap(),
        parts.iter().map(|p| p.id).collect(),
        Some(Box::new(move |g, _, _| {
            let m = g.rows();
            let total = g.cols();
            let mut out = Vec::with_capacity(widths_back.len());
            let mut offset = 0;
            for &w in &widths_back {
                let mut d = Vec::with_capacity(m * w);
                for i in 0..m {
                    d.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                }
                out.push(Tensor::matrix(m, w, d).unwrap());
                offset += w;
            }
            out
        })),
    )
}
