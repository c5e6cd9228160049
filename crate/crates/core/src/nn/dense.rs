//! Feed-forward dense stacks with optional batch normalization.
//!
//! Layer `i` computes `act(norm(X·Wᵢ + bᵢ))`. Weights are stored `in × out`.
//! Gradients accumulate into the [`ParamSet`] buffers; they are only cleared
//! by [`ParamSet::zero_grad`] or an optimizer step.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::matrix::Matrix;
use super::params::{Param, ParamSet};
use super::scalar::{Dual, Scalar};
use crate::error::{config, Error, Result};

pub const NORM_EPS: f64 = 1e-5;
/// Running-statistics update weight for normalization layers.
pub const NORM_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
    pub norm: bool,
}

impl LayerSpec {
    pub const fn new(input: usize, output: usize, activation: Activation, norm: bool) -> Self {
        Self { input, output, activation, norm }
    }
}

/// Train mode normalizes with batch statistics; eval mode with running ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug)]
struct Slots {
    weight: usize,
    bias: usize,
    norm: Option<NormSlots>,
}

#[derive(Clone, Copy, Debug)]
struct NormSlots {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Clone, Debug)]
struct LayerTrace<S> {
    input: Matrix<S>,
    /// Value fed to the activation.
    pre_act: Matrix<S>,
    norm: Option<NormTrace<S>>,
}

#[derive(Clone, Debug)]
struct NormTrace<S> {
    xhat: Matrix<S>,
    inv_std: Vec<S>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
    mode: Mode,
}

/// Activations recorded by a forward pass, consumed by backward.
#[derive(Clone, Debug)]
pub struct Trace<S = f64> {
    layers: Vec<LayerTrace<S>>,
}

impl<S: Scalar> Trace<S> {
    /// Smallest |pre-activation| over relu units; `inf` when there are none.
    /// Finite-difference checks skip points closer to a kink than their step.
    pub fn relu_margin(&self, specs: &[LayerSpec]) -> f64 {
        self.layers
            .iter()
            .zip(specs)
            .filter(|(_, s)| s.activation == Activation::Relu)
            .flat_map(|(l, _)| l.pre_act.as_slice().iter().map(|v| v.re().abs()))
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Clone, Debug)]
pub struct DenseNet<S = f64> {
    specs: Vec<LayerSpec>,
    params: ParamSet<S>,
    slots: Vec<Slots>,
    mode: Mode,
    last: Option<Trace<S>>,
}

fn layer_slots<S: Scalar>(specs: &[LayerSpec], params: &ParamSet<S>) -> Result<Vec<Slots>> {
    let find = |name: String, shape: (usize, usize)| -> Result<usize> {
        let i = params
            .iter()
            .position(|p| p.name == name)
            .ok_or_else(|| config(format!("missing tensor {name}")))?;
        if params.by_index(i).shape != shape {
            return Err(config(format!(
                "tensor {name} has shape {:?}, expected {shape:?}",
                params.by_index(i).shape
            )));
        }
        Ok(i)
    };
    specs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            Ok(Slots {
                weight: find(format!("l{i}.weight"), (s.input, s.output))?,
                bias: find(format!("l{i}.bias"), (1, s.output))?,
                norm: if s.norm {
                    Some(NormSlots {
                        gamma: find(format!("l{i}.gamma"), (1, s.output))?,
                        beta: find(format!("l{i}.beta"), (1, s.output))?,
                        mean: find(format!("l{i}.running_mean"), (1, s.output))?,
                        var: find(format!("l{i}.running_var"), (1, s.output))?,
                    })
                } else {
                    None
                },
            })
        })
        .collect()
}

fn check_chain(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(config("a dense net needs at least one layer"));
    }
    for (i, w) in specs.windows(2).enumerate() {
        if w[0].output != w[1].input {
            return Err(config(format!(
                "layer {i} outputs {} but layer {} expects {}",
                w[0].output,
                i + 1,
                w[1].input
            )));
        }
    }
    Ok(())
}

impl DenseNet<f64> {
    /// He-normal weights for relu layers, Glorot-normal otherwise; zero biases.
    /// A normalized layer's bias is a frozen buffer, since normalization
    /// cancels any shift before it.
    pub fn new<R: Rng + ?Sized>(specs: &[LayerSpec], rng: &mut R) -> Result<Self> {
        check_chain(specs)?;
        let mut params = ParamSet::new();
        for (i, s) in specs.iter().enumerate() {
            let std = match s.activation {
                Activation::Relu => (2.0 / s.input as f64).sqrt(),
                Activation::Identity => (2.0 / (s.input + s.output) as f64).sqrt(),
            };
            let normal = Normal::new(0.0, std).map_err(|e| config(e.to_string()))?;
            let w = (0..s.input * s.output).map(|_| normal.sample(rng)).collect();
            params.push(Param::new(format!("l{i}.weight"), (s.input, s.output), w)?)?;
            let bias = if s.norm { Param::buffer } else { Param::new };
            params.push(bias(format!("l{i}.bias"), (1, s.output), vec![0.0; s.output])?)?;
            if s.norm {
                params.push(Param::new(format!("l{i}.gamma"), (1, s.output), vec![1.0; s.output])?)?;
                params.push(Param::new(format!("l{i}.beta"), (1, s.output), vec![0.0; s.output])?)?;
                params.push(Param::buffer(
                    format!("l{i}.running_mean"),
                    (1, s.output),
                    vec![0.0; s.output],
                )?)?;
                params.push(Param::buffer(
                    format!("l{i}.running_var"),
                    (1, s.output),
                    vec![1.0; s.output],
                )?)?;
            }
        }
        Self::from_params(specs, params)
    }

    /// A single square identity-activation layer with identity weights.
    pub fn identity(width: usize) -> Self {
        let spec = [LayerSpec::new(width, width, Activation::Identity, false)];
        let mut params = ParamSet::new();
        params
            .push(Param::new("l0.weight", (width, width), Matrix::identity(width).into_vec()).unwrap())
            .unwrap();
        params.push(Param::new("l0.bias", (1, width), vec![0.0; width]).unwrap()).unwrap();
        Self::from_params(&spec, params).unwrap()
    }

    /// Dual-number copy; `tangent` seeds the trainable entries (flat order).
    pub fn lift(&self, tangent: Option<&[f64]>) -> Result<DenseNet<Dual>> {
        Ok(DenseNet {
            specs: self.specs.clone(),
            params: self.params.lift(tangent)?,
            slots: self.slots.clone(),
            mode: self.mode,
            last: None,
        })
    }

    /// Folds a train-mode trace's batch statistics into the running averages.
    pub fn commit_stats<S: Scalar>(&mut self, trace: &Trace<S>) {
        for (slot, lt) in self.slots.iter().zip(&trace.layers) {
            let (Some(ns), Some(nt)) = (slot.norm, lt.norm.as_ref()) else { continue };
            if nt.mode != Mode::Train || nt.batch_mean.is_empty() {
                continue;
            }
            let m = &mut self.params.by_index_mut(ns.mean).value;
            for (r, &b) in m.iter_mut().zip(&nt.batch_mean) {
                *r = (1.0 - NORM_MOMENTUM) * *r + NORM_MOMENTUM * b;
            }
            let v = &mut self.params.by_index_mut(ns.var).value;
            for (r, &b) in v.iter_mut().zip(&nt.batch_var) {
                *r = (1.0 - NORM_MOMENTUM) * *r + NORM_MOMENTUM * b;
            }
        }
    }

    /// Forward that records its trace for a later [`DenseNet::backward`] and,
    /// in train mode, updates running statistics.
    pub fn forward(&mut self, batch: &Matrix<f64>) -> Result<Matrix<f64>> {
        let (out, trace) = self.forward_traced(batch)?;
        if self.mode == Mode::Train {
            self.commit_stats(&trace);
        }
        self.last = Some(trace);
        Ok(out)
    }

    /// Backward through the trace recorded by the last [`DenseNet::forward`].
    pub fn backward(&mut self, upstream: &Matrix<f64>) -> Result<Matrix<f64>> {
        let trace = self
            .last
            .take()
            .ok_or_else(|| Error::State("backward called without a recorded forward pass".into()))?;
        let out = self.backward_traced(&trace, upstream);
        self.last = Some(trace);
        out
    }
}

impl<S: Scalar> DenseNet<S> {
    pub fn from_params(specs: &[LayerSpec], params: ParamSet<S>) -> Result<Self> {
        check_chain(specs)?;
        let slots = layer_slots(specs, &params)?;
        Ok(Self { specs: specs.to_vec(), params, slots, mode: Mode::Train, last: None })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }
    pub fn params(&self) -> &ParamSet<S> {
        &self.params
    }
    pub fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }
    pub fn input_width(&self) -> usize {
        self.specs[0].input
    }
    pub fn output_width(&self) -> usize {
        self.specs[self.specs.len() - 1].output
    }
    pub fn mode(&self) -> Mode {
        self.mode
    }
    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    fn tensor(&self, i: usize) -> &[S] {
        &self.params.by_index(i).value
    }

    /// Pure forward pass; returns the output and the trace backward needs.
    pub fn forward_traced(&self, batch: &Matrix<S>) -> Result<(Matrix<S>, Trace<S>)> {
        if batch.cols() != self.input_width() {
            return Err(config(format!(
                "input width {} does not match net input {}",
                batch.cols(),
                self.input_width()
            )));
        }
        let mut x = batch.clone();
        let mut layers = Vec::with_capacity(self.specs.len());
        for (spec, slot) in self.specs.iter().zip(&self.slots) {
            let w = Matrix::from_vec(spec.input, spec.output, self.tensor(slot.weight).to_vec())?;
            let mut y = x.matmul(&w)?;
            let b = self.tensor(slot.bias);
            for r in 0..y.rows() {
                for (v, &bv) in y.row_mut(r).iter_mut().zip(b) {
                    *v += bv;
                }
            }
            let norm = match slot.norm {
                Some(ns) => Some(self.normalize(&mut y, ns)),
                None => None,
            };
            let pre_act = y;
            let out = match spec.activation {
                Activation::Relu => pre_act.map(|v| if v.re() > 0.0 { v } else { S::zero() }),
                Activation::Identity => pre_act.clone(),
            };
            layers.push(LayerTrace { input: x, pre_act, norm });
            x = out;
        }
        Ok((x, Trace { layers }))
    }

    /// Normalizes `y` in place and returns what backward needs.
    fn normalize(&self, y: &mut Matrix<S>, ns: NormSlots) -> NormTrace<S> {
        let n = y.rows();
        let width = y.cols();
        let gamma = self.tensor(ns.gamma);
        let beta = self.tensor(ns.beta);
        let (mean, var): (Vec<S>, Vec<S>) = match self.mode {
            Mode::Train if n > 0 => {
                let inv_n = 1.0 / n as f64;
                let mean: Vec<S> = y.column_sums().into_iter().map(|s| s.scale(inv_n)).collect();
                let mut var = vec![S::zero(); width];
                for r in y.iter_rows() {
                    for ((acc, &v), &m) in var.iter_mut().zip(r).zip(&mean) {
                        let d = v - m;
                        *acc += d * d;
                    }
                }
                let var = var.into_iter().map(|s| s.scale(inv_n)).collect();
                (mean, var)
            }
            _ => (self.tensor(ns.mean).to_vec(), self.tensor(ns.var).to_vec()),
        };
        let inv_std: Vec<S> =
            var.iter().map(|&v| S::one() / (v + S::from_f64(NORM_EPS)).sqrt()).collect();
        let mut xhat = Matrix::zeros(n, width);
        for r in 0..n {
            let row = y.row_mut(r);
            let xr = xhat.row_mut(r);
            for j in 0..width {
                let h = (row[j] - mean[j]) * inv_std[j];
                xr[j] = h;
                row[j] = gamma[j] * h + beta[j];
            }
        }
        let stats_mode = if self.mode == Mode::Train && n > 0 { Mode::Train } else { Mode::Eval };
        NormTrace {
            xhat,
            inv_std,
            batch_mean: mean.iter().map(|v| v.re()).collect(),
            batch_var: var.iter().map(|v| v.re()).collect(),
            mode: stats_mode,
        }
    }

    /// Accumulates parameter gradients for `upstream = ∂loss/∂output` and
    /// returns `∂loss/∂input`.
    pub fn backward_traced(&mut self, trace: &Trace<S>, upstream: &Matrix<S>) -> Result<Matrix<S>> {
        if trace.layers.len() != self.specs.len() {
            return Err(Error::State("trace does not belong to this net".into()));
        }
        let last = &trace.layers[trace.layers.len() - 1];
        if upstream.shape() != last.pre_act.shape() {
            return Err(config(format!(
                "upstream shape {:?} does not match output {:?}",
                upstream.shape(),
                last.pre_act.shape()
            )));
        }
        let mut grad = upstream.clone();
        for li in (0..self.specs.len()).rev() {
            let spec = self.specs[li];
            let slot = self.slots[li];
            let lt = &trace.layers[li];
            if spec.activation == Activation::Relu {
                for (g, &a) in grad.as_mut_slice().iter_mut().zip(lt.pre_act.as_slice()) {
                    if a.re() <= 0.0 {
                        *g = S::zero();
                    }
                }
            }
            if let (Some(ns), Some(nt)) = (slot.norm, lt.norm.as_ref()) {
                grad = self.norm_backward(ns, nt, &grad);
            }
            let dw = lt.input.t_matmul(&grad)?;
            let db = grad.column_sums();
            for (g, &d) in self.params.by_index_mut(slot.weight).grad.iter_mut().zip(dw.as_slice()) {
                *g += d;
            }
            let bias = self.params.by_index_mut(slot.bias);
            if bias.trainable {
                for (g, &d) in bias.grad.iter_mut().zip(&db) {
                    *g += d;
                }
            }
            let w = Matrix::from_vec(spec.input, spec.output, self.tensor(slot.weight).to_vec())?;
            grad = grad.matmul_t(&w)?;
        }
        Ok(grad)
    }

    fn norm_backward(&mut self, ns: NormSlots, nt: &NormTrace<S>, grad: &Matrix<S>) -> Matrix<S> {
        let n = grad.rows();
        let width = grad.cols();
        let gamma = self.tensor(ns.gamma).to_vec();
        let mut dgamma = vec![S::zero(); width];
        let mut dbeta = vec![S::zero(); width];
        for r in 0..n {
            for j in 0..width {
                dgamma[j] += grad[(r, j)] * nt.xhat[(r, j)];
                dbeta[j] += grad[(r, j)];
            }
        }
        for (g, d) in self.params.by_index_mut(ns.gamma).grad.iter_mut().zip(&dgamma) {
            *g += *d;
        }
        for (g, d) in self.params.by_index_mut(ns.beta).grad.iter_mut().zip(&dbeta) {
            *g += *d;
        }
        let mut dx = Matrix::zeros(n, width);
        match nt.mode {
            Mode::Eval => {
                for r in 0..n {
                    for j in 0..width {
                        dx[(r, j)] = grad[(r, j)] * gamma[j] * nt.inv_std[j];
                    }
                }
            }
            Mode::Train => {
                // dxhat = g·γ;  dx = inv/n · (n·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
                let inv_n = 1.0 / n as f64;
                for j in 0..width {
                    let mut sum = S::zero();
                    let mut sum_x = S::zero();
                    for r in 0..n {
                        let d = grad[(r, j)] * gamma[j];
                        sum += d;
                        sum_x += d * nt.xhat[(r, j)];
                    }
                    for r in 0..n {
                        let d = grad[(r, j)] * gamma[j];
                        dx[(r, j)] = nt.inv_std[j]
                            * (d - sum.scale(inv_n) - nt.xhat[(r, j)] * sum_x.scale(inv_n));
                    }
                }
            }
        }
        dx
    }
}
