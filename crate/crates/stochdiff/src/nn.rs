//! Differentiable building blocks: LSTM cell, fully connected chains,
//! scaled dot-product attention, and a finite-difference gradient checker.
//!
//! Each block is a lightweight descriptor (name prefix plus sizes).
//! `init` registers its parameters into a [`ParameterSet`]; `apply`/`step`
//! builds the forward graph on a [`Tape`]. The free functions
//! [`lstm_step`], [`fcn_apply`] and [`attention`] are plain-value
//! wrappers that validate shapes and evaluate without exposing the tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{BoundParams, ParameterSet};
use crate::tape::{concat_cols, Tape, Tx};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
    Softplus,
}

pub fn activate<'t>(x: Tx<'t>, act: Activation) -> Tx<'t> {
    match act {
        Activation::Relu => x.relu(),
        Activation::Tanh => x.tanh(),
        Activation::Identity => x,
        Activation::Softplus => x.softplus(),
    }
}

/// Uniform init in `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`.
fn init_weight(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor::matrix(fan_in, fan_out, data).unwrap()
}

/// Recurrent hidden pair.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.h.len()
    }
}

/// Standard four-gate LSTM cell with packed gate weights.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub name: String,
    pub input_size: usize,
    pub hidden_size: usize,
    w_ih: String,
    w_hh: String,
    b: String,
}

impl LstmCell {
    pub fn new(name: impl Into<String>, input_size: usize, hidden_size: usize) -> Self {
        let name = name.into();
        Self {
            w_ih: format!("{name}.w_ih"),
            w_hh: format!("{name}.w_hh"),
            b: format!("{name}.b"),
            name,
            input_size,
            hidden_size,
        }
    }

    fn w_ih(&self) -> &str {
        &self.w_ih
    }

    fn w_hh(&self) -> &str {
        &self.w_hh
    }

    fn bias(&self) -> &str {
        &self.b
    }

    pub fn init(&self, ps: &mut ParameterSet, rng: &mut impl Rng) {
        ps.insert(
            self.w_ih.clone(),
            init_weight(rng, self.input_size, 4 * self.hidden_size),
        );
        ps.insert(
            self.w_hh.clone(),
            init_weight(rng, self.hidden_size, 4 * self.hidden_size),
        );
        ps.insert(self.b.clone(), Tensor::zeros(&[1, 4 * self.hidden_size]));
    }

    /// One step on the tape. `input` is 1×in, `h`/`c` are 1×H.
    pub fn step<'t>(
        &self,
        p: &BoundParams<'t>,
        input: Tx<'t>,
        h: Tx<'t>,
        c: Tx<'t>,
    ) -> (Tx<'t>, Tx<'t>) {
        let hs = self.hidden_size;
        let gates = input
            .matmul(p.get(self.w_ih()))
            .add(h.matmul(p.get(self.w_hh())))
            .add_row(p.get(self.bias()));
        let i = gates.slice_cols(0, hs).sigmoid();
        let f = gates.slice_cols(hs, 2 * hs).sigmoid();
        let g = gates.slice_cols(2 * hs, 3 * hs).tanh();
        let o = gates.slice_cols(3 * hs, 4 * hs).sigmoid();
        let c_new = f.mul(c).add(i.mul(g));
        let h_new = o.mul(c_new.tanh());
        (h_new, c_new)
    }

    fn validate(&self, params: &ParameterSet) -> Result<()> {
        expect_param(params, self.w_ih(), &[self.input_size, 4 * self.hidden_size])?;
        expect_param(params, self.w_hh(), &[self.hidden_size, 4 * self.hidden_size])?;
        expect_param(params, self.bias(), &[1, 4 * self.hidden_size])
    }
}

/// Plain-value LSTM step: validates shapes, evaluates, returns the new state.
pub fn lstm_step(
    cell: &LstmCell,
    params: &ParameterSet,
    input: &[f64],
    state: &LstmState,
) -> Result<LstmState> {
    if input.len() != cell.input_size {
        return Err(Error::ShapeMismatch(format!(
            "lstm input len {} vs configured {}",
            input.len(),
            cell.input_size
        )));
    }
    if state.h.len() != cell.hidden_size || state.c.len() != cell.hidden_size {
        return Err(Error::ShapeMismatch(format!(
            "lstm state widths h={} c={} vs configured {}",
            state.h.len(),
            state.c.len(),
            cell.hidden_size
        )));
    }
    cell.validate(params)?;
    let tape = Tape::new();
    let p = params.bind(&tape);
    let x = tape.constant(Tensor::row(input));
    let h = tape.constant(Tensor::row(&state.h));
    let c = tape.constant(Tensor::row(&state.c));
    let (h2, c2) = cell.step(&p, x, h, c);
    let out = LstmState {
        h: h2.value().data().to_vec(),
        c: c2.value().data().to_vec(),
    };
    if !out.h.iter().chain(&out.c).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("lstm_step output".into()));
    }
    Ok(out)
}

/// Fully connected chain. `dims` lists layer widths from input to output;
/// `hidden` activates every layer but the last, `output` the last.
#[derive(Debug, Clone)]
pub struct Fcn {
    pub name: String,
    pub dims: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
    weights: Vec<String>,
    biases: Vec<String>,
}

impl Fcn {
    pub fn new(
        name: impl Into<String>,
        dims: Vec<usize>,
        hidden: Activation,
        output: Activation,
    ) -> Self {
        assert!(dims.len() >= 2, "fcn needs at least input and output dims");
        let name = name.into();
        let weights = (0..dims.len() - 1).map(|l| format!("{name}.w{l}")).collect();
        let biases = (0..dims.len() - 1).map(|l| format!("{name}.b{l}")).collect();
        Self {
            name,
            dims,
            hidden,
            output,
            weights,
            biases,
        }
    }

    fn weight(&self, layer: usize) -> &str {
        &self.weights[layer]
    }

    fn bias(&self, layer: usize) -> &str {
        &self.biases[layer]
    }

    pub fn init(&self, ps: &mut ParameterSet, rng: &mut impl Rng) {
        for l in 0..self.dims.len() - 1 {
            ps.insert(
                self.weights[l].clone(),
                init_weight(rng, self.dims[l], self.dims[l + 1]),
            );
            ps.insert(self.biases[l].clone(), Tensor::zeros(&[1, self.dims[l + 1]]));
        }
    }

    pub fn apply<'t>(&self, p: &BoundParams<'t>, mut x: Tx<'t>) -> Tx<'t> {
        let last = self.dims.len() - 2;
        for l in 0..=last {
            x = x.matmul(p.get(self.weight(l))).add_row(p.get(self.bias(l)));
            x = activate(x, if l == last { self.output } else { self.hidden });
        }
        x
    }

    fn validate(&self, params: &ParameterSet) -> Result<()> {
        for l in 0..self.dims.len() - 1 {
            expect_param(params, self.weight(l), &[self.dims[l], self.dims[l + 1]])?;
            expect_param(params, self.bias(l), &[1, self.dims[l + 1]])?;
        }
        Ok(())
    }
}

/// Plain-value FCN application on a single row.
pub fn fcn_apply(fcn: &Fcn, params: &ParameterSet, input: &[f64]) -> Result<Vec<f64>> {
    if input.len() != fcn.dims[0] {
        return Err(Error::ShapeMismatch(format!(
            "fcn input len {} vs configured {}",
            input.len(),
            fcn.dims[0]
        )));
    }
    fcn.validate(params)?;
    let tape = Tape::new();
    let p = params.bind(&tape);
    let x = tape.constant(Tensor::row(input));
    let y = fcn.apply(&p, x).value();
    if !y.all_finite() {
        return Err(Error::NonFinite("fcn_apply output".into()));
    }
    Ok(y.data().to_vec())
}

/// Scaled dot-product attention with learned Q/K/V projections and an
/// optional head split (`proj_dim` and `value_dim` divisible by `heads`).
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub name: String,
    pub query_in: usize,
    pub key_in: usize,
    pub value_in: usize,
    pub proj_dim: usize,
    pub value_dim: usize,
    pub heads: usize,
    wq: String,
    wk: String,
    wv: String,
}

impl AttentionBlock {
    pub fn new(
        name: impl Into<String>,
        query_in: usize,
        key_in: usize,
        value_in: usize,
        proj_dim: usize,
        value_dim: usize,
        heads: usize,
    ) -> Self {
        assert!(heads >= 1 && proj_dim % heads == 0 && value_dim % heads == 0);
        let name = name.into();
        Self {
            wq: format!("{name}.wq"),
            wk: format!("{name}.wk"),
            wv: format!("{name}.wv"),
            name,
            query_in,
            key_in,
            value_in,
            proj_dim,
            value_dim,
            heads,
        }
    }

    fn wq(&self) -> &str {
        &self.wq
    }

    fn wk(&self) -> &str {
        &self.wk
    }

    fn wv(&self) -> &str {
        &self.wv
    }

    pub fn init(&self, ps: &mut ParameterSet, rng: &mut impl Rng) {
        ps.insert(self.wq.clone(), init_weight(rng, self.query_in, self.proj_dim));
        ps.insert(self.wk.clone(), init_weight(rng, self.key_in, self.proj_dim));
        ps.insert(self.wv.clone(), init_weight(rng, self.value_in, self.value_dim));
    }

    /// `softmax(Q Kᵀ / sqrt(d_head)) V` per head, heads concatenated.
    pub fn apply<'t>(
        &self,
        tape: &'t Tape,
        p: &BoundParams<'t>,
        queries: Tx<'t>,
        keys: Tx<'t>,
        values: Tx<'t>,
    ) -> Tx<'t> {
        let q = queries.matmul(p.get(self.wq()));
        let k = keys.matmul(p.get(self.wk()));
        let v = values.matmul(p.get(self.wv()));
        let dh = self.proj_dim / self.heads;
        let vh = self.value_dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let qh = q.slice_cols(head * dh, (head + 1) * dh);
            let kh = k.slice_cols(head * dh, (head + 1) * dh);
            let vv = v.slice_cols(head * vh, (head + 1) * vh);
            let weights = qh.matmul(kh.transpose()).scale(scale).softmax_rows();
            outs.push(weights.matmul(vv));
        }
        if self.heads == 1 {
            outs[0]
        } else {
            concat_cols(tape, &outs)
        }
    }

    fn validate(&self, params: &ParameterSet) -> Result<()> {
        expect_param(params, self.wq(), &[self.query_in, self.proj_dim])?;
        expect_param(params, self.wk(), &[self.key_in, self.proj_dim])?;
        expect_param(params, self.wv(), &[self.value_in, self.value_dim])
    }
}

/// Plain-value attention: rows of `queries` attend over rows of
/// `keys`/`values` (self-attention when the caller passes one source).
pub fn attention(
    block: &AttentionBlock,
    params: &ParameterSet,
    queries: &Tensor,
    keys: &Tensor,
    values: &Tensor,
) -> Result<Tensor> {
    if keys.rows() != values.rows() {
        return Err(Error::ShapeMismatch(format!(
            "key rows {} vs value rows {}",
            keys.rows(),
            values.rows()
        )));
    }
    if queries.cols() != block.query_in
        || keys.cols() != block.key_in
        || values.cols() != block.value_in
    {
        return Err(Error::ShapeMismatch(format!(
            "attention widths q={} k={} v={} vs configured {}/{}/{}",
            queries.cols(),
            keys.cols(),
            values.cols(),
            block.query_in,
            block.key_in,
            block.value_in
        )));
    }
    block.validate(params)?;
    let tape = Tape::new();
    let p = params.bind(&tape);
    let q = tape.constant(queries.clone());
    let k = tape.constant(keys.clone());
    let v = tape.constant(values.clone());
    let out = block.apply(&tape, &p, q, k, v).value();
    if !out.all_finite() {
        return Err(Error::NonFinite("attention output".into()));
    }
    Ok(out)
}

fn expect_param(params: &ParameterSet, name: &str, shape: &[usize]) -> Result<()> {
    match params.get(name) {
        None => Err(Error::ShapeMismatch(format!("missing parameter {name}"))),
        Some(t) if t.shape() != shape => Err(Error::ShapeMismatch(format!(
            "parameter {name}: shape {:?} vs expected {:?}",
            t.shape(),
            shape
        ))),
        _ => Ok(()),
    }
}

/// Outcome of a finite-difference gradient verification.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub values_checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

/// Compares the tape gradient of a deterministic scalar loss against
/// central finite differences, parameter by parameter.
///
/// The builder must be a pure function of the bound parameters: any
/// randomness has to come from pre-drawn constants captured outside.
pub fn gradient_check<F>(
    build: F,
    params: &mut ParameterSet,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &BoundParams<'t>) -> Result<Tx<'t>>,
{
    let eval = |params: &ParameterSet| -> Result<f64> {
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let loss = build(&tape, &bound)?;
        let v = loss.item();
        if !v.is_finite() {
            return Err(Error::NonFinite("gradient_check loss".into()));
        }
        Ok(v)
    };

    let tape = Tape::new();
    let bound = params.bind(&tape);
    let loss = build(&tape, &bound)?;
    if !loss.item().is_finite() {
        return Err(Error::NonFinite("gradient_check loss".into()));
    }
    let grads = tape.backward(loss);
    let names: Vec<String> = params.names().to_vec();
    let analytic: Vec<Tensor> = names
        .iter()
        .map(|name| {
            grads
                .get(bound.get(name))
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(params.get(name).unwrap().shape()))
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        values_checked: 0,
        tolerance,
    };
    for (name, grad) in names.iter().zip(&analytic) {
        for idx in 0..grad.len() {
            let orig = params.get(name).unwrap().data()[idx];
            params.get_mut(name).unwrap().data_mut()[idx] = orig + step;
            let fp = eval(params);
            params.get_mut(name).unwrap().data_mut()[idx] = orig - step;
            let fm = eval(params);
            params.get_mut(name).unwrap().data_mut()[idx] = orig;
            let (fp, fm) = (fp?, fm?);
            let numeric = (fp - fm) / (2.0 * step);
            let a = grad.data()[idx];
            let scale = a.abs().max(numeric.abs());
            let err = if scale < 1e-6 {
                (a - numeric).abs()
            } else {
                (a - numeric).abs() / scale
            };
            report.values_checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = name.clone();
                report.worst_index = idx;
            }
        }
    }
    Ok(report)
}
