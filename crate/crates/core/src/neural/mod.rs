//! Learned state-space model: a dense encoder from a flattened window to a
//! latent state, a dense decoder back to sensor space, and a transition
//! network that combines the previous latent state with an LSTM summary of
//! the window.
//!
//! Training minimises, per window view at time `t`,
//!
//! ```text
//! a1 |x[t-1] - dec(z[t-1])|^2 + a2 |x[t] - dec(z[t])|^2 + a3 |z[t] - z[t-1]|^2
//! z[t-1] = enc(x[t-tau..t]),  z[t] = trans(z[t-1], x[t-tau..t])
//! ```
//!
//! so the first term is a reconstruction error and the second a one-step
//! prediction error.

mod adam;
mod io;
mod train;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::timeseries::WindowView;

pub use adam::AdamState;
pub use io::{load_bundle, load_model, save_bundle, save_model, ModelBundle};
pub use train::{estimate_noise, train, Hyperparameters, NoiseEstimate, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Linear,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Linear => "linear",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tanh" => Some(Activation::Tanh),
            "linear" => Some(Activation::Linear),
            _ => None,
        }
    }
}

/// One dense layer, `act(W x + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: DMatrix<f64>,
    pub biases: DVector<f64>,
    pub activation: Activation,
}

impl LayerParams {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            weights: DMatrix::zeros(outputs, inputs),
            biases: DVector::zeros(outputs),
            activation,
        }
    }

    fn uniform<R: Rng>(inputs: usize, outputs: usize, activation: Activation, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let mut layer = Self::zeros(inputs, outputs, activation);
        fill_uniform(layer.weights.as_mut_slice(), bound, rng);
        fill_uniform(layer.biases.as_mut_slice(), bound, rng);
        layer
    }

    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }

    fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = self.biases.clone();
        y.gemv(1.0, &self.weights, x, 1.0);
        if self.activation == Activation::Tanh {
            y.apply(|v| *v = v.tanh());
        }
        y
    }
}

/// One LSTM gate over the concatenation `[input; hidden]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gate {
    pub weights: DMatrix<f64>,
    pub biases: DVector<f64>,
}

impl Gate {
    fn zeros(concat: usize, hidden: usize) -> Self {
        Self {
            weights: DMatrix::zeros(hidden, concat),
            biases: DVector::zeros(hidden),
        }
    }

    fn pre_activation(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut a = self.biases.clone();
        a.gemv(1.0, &self.weights, v, 1.0);
        a
    }
}

/// Single LSTM cell with input, forget, output and candidate gates.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentCellParams {
    pub input: Gate,
    pub forget: Gate,
    pub output: Gate,
    pub candidate: Gate,
}

impl RecurrentCellParams {
    pub fn zeros(inputs: usize, hidden: usize) -> Self {
        let g = Gate::zeros(inputs + hidden, hidden);
        Self {
            input: g.clone(),
            forget: g.clone(),
            output: g.clone(),
            candidate: g,
        }
    }

    pub fn hidden(&self) -> usize {
        self.input.weights.nrows()
    }

    pub fn inputs(&self) -> usize {
        self.input.weights.ncols() - self.hidden()
    }

    fn gates(&self) -> [&Gate; 4] {
        [&self.input, &self.forget, &self.output, &self.candidate]
    }

    fn gates_mut(&mut self) -> [&mut Gate; 4] {
        [
            &mut self.input,
            &mut self.forget,
            &mut self.output,
            &mut self.candidate,
        ]
    }
}

/// Every trainable tensor of the model. Gradients and optimizer moments use
/// the same container.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub encoder: Vec<LayerParams>,
    pub decoder: Vec<LayerParams>,
    pub lstm: RecurrentCellParams,
    pub transition: Vec<LayerParams>,
}

/// Gradient of the loss, shaped exactly like [`NetParams`].
pub type Gradient = NetParams;

/// A named view of one parameter tensor. `data` is column-major.
#[derive(Debug)]
pub struct TensorRef<'a> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [f64],
}

impl NetParams {
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.fill(0.0);
        }
        out
    }

    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        let mut push = |name: String, rows, cols, data| {
            out.push(TensorRef {
                name,
                rows,
                cols,
                data,
            })
        };
        for (group, layers) in [
            ("encoder", &self.encoder),
            ("decoder", &self.decoder),
            ("transition", &self.transition),
        ] {
            for (i, l) in layers.iter().enumerate() {
                let (r, c) = l.weights.shape();
                push(format!("{group}.{i}.weights"), r, c, l.weights.as_slice());
                push(format!("{group}.{i}.biases"), r, 1, l.biases.as_slice());
            }
        }
        for (gname, g) in GATE_NAMES.iter().zip(self.lstm.gates()) {
            let (r, c) = g.weights.shape();
            push(format!("lstm.{gname}.weights"), r, c, g.weights.as_slice());
            push(format!("lstm.{gname}.biases"), r, 1, g.biases.as_slice());
        }
        out
    }

    /// Mutable slices in the same order as [`NetParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for layers in [&mut self.encoder, &mut self.decoder, &mut self.transition] {
            for l in layers.iter_mut() {
                out.push(l.weights.as_mut_slice());
                out.push(l.biases.as_mut_slice());
            }
        }
        for g in self.lstm.gates_mut() {
            out.push(g.weights.as_mut_slice());
            out.push(g.biases.as_mut_slice());
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn add_assign(&mut self, other: &NetParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b.data) {
                *x += y;
            }
        }
    }

    fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            for x in t.iter_mut() {
                *x *= s;
            }
        }
    }
}

pub(crate) const GATE_NAMES: [&str; 4] = ["input", "forget", "output", "candidate"];

/// Sensor count `M`, latent size `M'` and window length `tau`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub sensors: usize,
    pub latent: usize,
    pub window: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub reconstruction: f64,
    pub prediction: f64,
    pub smoothness: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            reconstruction: 0.45,
            prediction: 0.45,
            smoothness: 0.45,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuralModel {
    pub params: NetParams,
    pub dims: Dims,
    pub loss_weights: LossWeights,
}

fn fill_uniform<R: Rng>(data: &mut [f64], bound: f64, rng: &mut R) {
    for v in data {
        *v = rng.random_range(-bound..=bound);
    }
}

fn check_chain(group: &str, layers: &[LayerParams], inputs: usize, outputs: usize) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::Shape(format!("{group} has no layers")));
    }
    let mut width = inputs;
    for (i, l) in layers.iter().enumerate() {
        if l.inputs() != width || l.biases.len() != l.outputs() {
            return Err(Error::Shape(format!(
                "{group} layer {i} is {}x{} with {} biases, expected {width} inputs",
                l.outputs(),
                l.inputs(),
                l.biases.len()
            )));
        }
        width = l.outputs();
    }
    if width != outputs {
        return Err(Error::Shape(format!("{group} produces {width} values, expected {outputs}")));
    }
    Ok(())
}

impl NeuralModel {
    /// Assemble a model from explicit parameters, validating every shape.
    pub fn from_parts(params: NetParams, dims: Dims, loss_weights: LossWeights) -> Result<Self> {
        let Dims {
            sensors,
            latent,
            window,
        } = dims;
        if sensors == 0 || latent == 0 || window == 0 {
            return Err(Error::Shape("dimensions must be positive".into()));
        }
        if latent > window * sensors {
            return Err(Error::Shape(format!(
                "latent size {latent} exceeds window*sensors = {}",
                window * sensors
            )));
        }
        check_chain("encoder", &params.encoder, window * sensors, latent)?;
        check_chain("decoder", &params.decoder, latent, sensors)?;
        let hidden = params.lstm.hidden();
        for (name, g) in GATE_NAMES.iter().zip(params.lstm.gates()) {
            if g.weights.shape() != (hidden, sensors + hidden) || g.biases.len() != hidden {
                return Err(Error::Shape(format!(
                    "lstm {name} gate is {:?}, expected ({hidden}, {})",
                    g.weights.shape(),
                    sensors + hidden
                )));
            }
        }
        check_chain("transition", &params.transition, latent + hidden, latent)?;
        if params.tensors().iter().any(|t| t.data.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numerical("non-finite parameter".into()));
        }
        Ok(Self {
            params,
            dims,
            loss_weights,
        })
    }

    /// Default topology: one tanh hidden layer of `hidden` units in the
    /// encoder, decoder and transition head, plus an LSTM of `hidden` units.
    /// Every tensor is drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn initialize<R: Rng>(
        dims: Dims,
        hidden: usize,
        loss_weights: LossWeights,
        rng: &mut R,
    ) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::Config("hidden_dim must be positive".into()));
        }
        let Dims {
            sensors,
            latent,
            window,
        } = dims;
        let encoder = vec![
            LayerParams::uniform(window * sensors, hidden, Activation::Tanh, rng),
            LayerParams::uniform(hidden, latent, Activation::Linear, rng),
        ];
        let decoder = vec![
            LayerParams::uniform(latent, hidden, Activation::Tanh, rng),
            LayerParams::uniform(hidden, sensors, Activation::Linear, rng),
        ];
        let mut lstm = RecurrentCellParams::zeros(sensors, hidden);
        let bound = 1.0 / ((sensors + hidden) as f64).sqrt();
        for g in lstm.gates_mut() {
            fill_uniform(g.weights.as_mut_slice(), bound, rng);
            fill_uniform(g.biases.as_mut_slice(), bound, rng);
        }
        let transition = vec![
            LayerParams::uniform(latent + hidden, hidden, Activation::Tanh, rng),
            LayerParams::uniform(hidden, latent, Activation::Linear, rng),
        ];
        Self::from_parts(
            NetParams {
                encoder,
                decoder,
                lstm,
                transition,
            },
            dims,
            loss_weights,
        )
    }

    fn check_window(&self, window: &DMatrix<f64>) -> Result<()> {
        let want = (self.dims.window, self.dims.sensors);
        if window.shape() != want {
            return Err(Error::Shape(format!(
                "window is {:?}, model expects {want:?}",
                window.shape()
            )));
        }
        Ok(())
    }

    fn check_latent(&self, z: &DVector<f64>) -> Result<()> {
        if z.len() != self.dims.latent {
            return Err(Error::Shape(format!(
                "latent vector has {} entries, model expects {}",
                z.len(),
                self.dims.latent
            )));
        }
        Ok(())
    }

    /// Window `tau x M` to latent state; the window is flattened row by row.
    pub fn encode(&self, window: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.check_window(window)?;
        Ok(mlp(&self.params.encoder, flatten(window)))
    }

    pub fn decode(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_latent(z)?;
        Ok(mlp(&self.params.decoder, z.clone()))
    }

    /// Final LSTM hidden state after reading the window top to bottom.
    pub fn window_context(&self, window: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.check_window(window)?;
        Ok(lstm_forward(&self.params.lstm, window).0)
    }

    /// Transition given a precomputed [`NeuralModel::window_context`].
    pub fn transition_with_context(&self, z_prev: &DVector<f64>, context: &DVector<f64>) -> DVector<f64> {
        mlp(&self.params.transition, concat(z_prev, context))
    }

    pub fn transition(&self, z_prev: &DVector<f64>, window: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.check_latent(z_prev)?;
        let ctx = self.window_context(window)?;
        Ok(self.transition_with_context(z_prev, &ctx))
    }

    fn check_view(&self, view: &WindowView) -> Result<()> {
        self.check_window(&view.past)?;
        if view.current.len() != self.dims.sensors {
            return Err(Error::Shape(format!(
                "observation has {} entries, model expects {}",
                view.current.len(),
                self.dims.sensors
            )));
        }
        Ok(())
    }

    /// Summed training objective over the views. Each view supplies the
    /// window `x[t-tau..t]`, whose last row is `x[t-1]`, and `x[t]`.
    pub fn loss(&self, batch: &[WindowView]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Precondition("loss over an empty batch".into()));
        }
        let mut total = 0.0;
        for view in batch {
            self.check_view(view)?;
            total += self.forward_item(view).loss;
        }
        Ok(total)
    }

    /// Analytic gradient of [`NeuralModel::loss`], returned with the loss.
    pub fn gradient(&self, batch: &[WindowView]) -> Result<(f64, Gradient)> {
        if batch.is_empty() {
            return Err(Error::Precondition("gradient over an empty batch".into()));
        }
        let mut grad = self.params.zeros_like();
        let mut total = 0.0;
        for view in batch {
            self.check_view(view)?;
            total += self.backward_item(view, &mut grad);
        }
        Ok((total, grad))
    }

    fn forward_item(&self, view: &WindowView) -> ItemForward {
        let p = &self.params;
        let w = &self.loss_weights;
        let x_prev = view.past.row(view.past.nrows() - 1).transpose();

        let enc = mlp_cached(&p.encoder, flatten(&view.past));
        let z_prev = enc.output().clone();
        let rec = mlp_cached(&p.decoder, z_prev.clone());
        let (context, lstm) = lstm_forward(&p.lstm, &view.past);
        let trans = mlp_cached(&p.transition, concat(&z_prev, &context));
        let z_next = trans.output().clone();
        let pred = mlp_cached(&p.decoder, z_next.clone());

        let r_err = rec.output() - &x_prev;
        let p_err = pred.output() - &view.current;
        let z_err = &z_next - &z_prev;
        let loss = w.reconstruction * r_err.norm_squared()
            + w.prediction * p_err.norm_squared()
            + w.smoothness * z_err.norm_squared();
        ItemForward {
            enc,
            rec,
            lstm,
            trans,
            pred,
            r_err,
            p_err,
            z_err,
            loss,
        }
    }

    fn backward_item(&self, view: &WindowView, grad: &mut Gradient) -> f64 {
        let p = &self.params;
        let w = &self.loss_weights;
        let f = self.forward_item(view);
        let latent = self.dims.latent;

        let d_rec = &f.r_err * (2.0 * w.reconstruction);
        let mut dz_prev = mlp_backward(&p.decoder, &f.rec, d_rec, &mut grad.decoder);

        let d_pred = &f.p_err * (2.0 * w.prediction);
        let mut dz_next = mlp_backward(&p.decoder, &f.pred, d_pred, &mut grad.decoder);
        let d_smooth = &f.z_err * (2.0 * w.smoothness);
        dz_next += &d_smooth;

        let d_in = mlp_backward(&p.transition, &f.trans, dz_next, &mut grad.transition);
        dz_prev += d_in.rows(0, latent);
        dz_prev -= &d_smooth;
        let d_context = d_in.rows(latent, d_in.len() - latent).into_owned();
        lstm_backward(&p.lstm, &f.lstm, d_context, &mut grad.lstm);

        mlp_backward(&p.encoder, &f.enc, dz_prev, &mut grad.encoder);
        f.loss
    }
}

struct ItemForward {
    enc: MlpCache,
    rec: MlpCache,
    lstm: LstmCache,
    trans: MlpCache,
    pred: MlpCache,
    r_err: DVector<f64>,
    p_err: DVector<f64>,
    z_err: DVector<f64>,
    loss: f64,
}

fn flatten(window: &DMatrix<f64>) -> DVector<f64> {
    let (r, c) = window.shape();
    DVector::from_fn(r * c, |k, _| window[(k / c, k % c)])
}

fn concat(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(a.len() + b.len());
    out.rows_mut(0, a.len()).copy_from(a);
    out.rows_mut(a.len(), b.len()).copy_from(b);
    out
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn mlp(layers: &[LayerParams], x: DVector<f64>) -> DVector<f64> {
    layers.iter().fold(x, |acc, l| l.forward(&acc))
}

/// Layer inputs and the final output: `acts[0]` is the network input.
struct MlpCache {
    acts: Vec<DVector<f64>>,
}

impl MlpCache {
    fn output(&self) -> &DVector<f64> {
        self.acts.last().expect("cache holds the input")
    }
}

fn mlp_cached(layers: &[LayerParams], x: DVector<f64>) -> MlpCache {
    let mut acts = Vec::with_capacity(layers.len() + 1);
    acts.push(x);
    for l in layers {
        let y = l.forward(acts.last().unwrap());
        acts.push(y);
    }
    MlpCache { acts }
}

/// Accumulates layer gradients and returns the gradient w.r.t. the input.
fn mlp_backward(
    layers: &[LayerParams],
    cache: &MlpCache,
    d_out: DVector<f64>,
    grads: &mut [LayerParams],
) -> DVector<f64> {
    let mut delta = d_out;
    for (i, l) in layers.iter().enumerate().rev() {
        if l.activation == Activation::Tanh {
            delta.zip_apply(&cache.acts[i + 1], |d, y| *d *= 1.0 - y * y);
        }
        let g = &mut grads[i];
        g.weights.ger(1.0, &delta, &cache.acts[i], 1.0);
        g.biases += &delta;
        let mut below = DVector::zeros(l.inputs());
        below.gemv_tr(1.0, &l.weights, &delta, 0.0);
        delta = below;
    }
    delta
}

struct LstmStep {
    v: DVector<f64>,
    c_prev: DVector<f64>,
    i: DVector<f64>,
    f: DVector<f64>,
    o: DVector<f64>,
    g: DVector<f64>,
    tanh_c: DVector<f64>,
}

struct LstmCache {
    steps: Vec<LstmStep>,
}

fn lstm_forward(cell: &RecurrentCellParams, window: &DMatrix<f64>) -> (DVector<f64>, LstmCache) {
    let hidden = cell.hidden();
    let inputs = cell.inputs();
    let mut h = DVector::zeros(hidden);
    let mut c = DVector::zeros(hidden);
    let mut steps = Vec::with_capacity(window.nrows());
    for row in window.row_iter() {
        let mut v = DVector::zeros(inputs + hidden);
        v.rows_mut(0, inputs).copy_from(&row.transpose());
        v.rows_mut(inputs, hidden).copy_from(&h);
        let i = cell.input.pre_activation(&v).map(sigmoid);
        let f = cell.forget.pre_activation(&v).map(sigmoid);
        let o = cell.output.pre_activation(&v).map(sigmoid);
        let g = cell.candidate.pre_activation(&v).map(f64::tanh);
        let c_next = f.component_mul(&c) + i.component_mul(&g);
        let tanh_c = c_next.map(f64::tanh);
        h = o.component_mul(&tanh_c);
        steps.push(LstmStep {
            v,
            c_prev: std::mem::replace(&mut c, c_next),
            i,
            f,
            o,
            g,
            tanh_c,
        });
    }
    (h, LstmCache { steps })
}

fn lstm_backward(
    cell: &RecurrentCellParams,
    cache: &LstmCache,
    d_h_final: DVector<f64>,
    grad: &mut RecurrentCellParams,
) {
    let hidden = cell.hidden();
    let inputs = cell.inputs();
    let mut dh = d_h_final;
    let mut dc = DVector::zeros(hidden);
    for s in cache.steps.iter().rev() {
        let d_o = dh.component_mul(&s.tanh_c);
        dc += dh
            .component_mul(&s.o)
            .component_mul(&s.tanh_c.map(|t| 1.0 - t * t));
        let d_i = dc.component_mul(&s.g);
        let d_g = dc.component_mul(&s.i);
        let d_f = dc.component_mul(&s.c_prev);
        dc = dc.component_mul(&s.f);

        let pre = [
            d_i.zip_map(&s.i, |d, a| d * a * (1.0 - a)),
            d_f.zip_map(&s.f, |d, a| d * a * (1.0 - a)),
            d_o.zip_map(&s.o, |d, a| d * a * (1.0 - a)),
            d_g.zip_map(&s.g, |d, a| d * (1.0 - a * a)),
        ];
        let mut dv = DVector::zeros(inputs + hidden);
        for ((gp, gg), da) in cell.gates().into_iter().zip(grad.gates_mut()).zip(&pre) {
            gg.weights.ger(1.0, da, &s.v, 1.0);
            gg.biases += da;
            dv.gemv_tr(1.0, &gp.weights, da, 1.0);
        }
        dh = dv.rows(inputs, hidden).into_owned();
    }
}

#[cfg(test)]
mod tests;
