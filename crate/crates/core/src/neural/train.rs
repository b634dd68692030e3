use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{AdamState, Dims, Gradient, LossWeights, NeuralModel};
use crate::error::{Error, Result};
use crate::linalg::{clamp_psd, sample_covariance};
use crate::timeseries::{make_windows, Dataset, WindowView};

/// Items per gradient work unit. Fixed so the floating-point summation order
/// does not depend on the thread count.
const GRAD_CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparameters {
    pub window: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub loss_weights: LossWeights,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            window: 12,
            latent_dim: 3,
            hidden_dim: 64,
            epochs: 100,
            learning_rate: 1e-3,
            batch_size: 64,
            loss_weights: LossWeights::default(),
        }
    }
}

/// Process (`q`, latent space) and measurement (`r`, sensor space) noise
/// covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseEstimate {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: NeuralModel,
    pub noise: NoiseEstimate,
    /// Mean per-window loss of each epoch.
    pub loss_history: Vec<f64>,
}

pub fn train(
    train_set: &Dataset,
    val_set: &Dataset,
    hyper: &Hyperparameters,
    seed: u64,
) -> Result<TrainOutcome> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Precondition("training and validation sets must be non-empty".into()));
    }
    if train_set.labels().is_some_and(|l| l.iter().any(|&x| x)) {
        return Err(Error::Precondition("training data must be normal-only".into()));
    }
    if hyper.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if train_set.num_features() != val_set.num_features() {
        return Err(Error::Shape("training and validation feature counts differ".into()));
    }
    let dims = Dims {
        sensors: train_set.num_features(),
        latent: hyper.latent_dim,
        window: hyper.window,
    };
    let views: Vec<WindowView> = make_windows(train_set, hyper.window)?.collect();
    if val_set.len() <= hyper.window {
        return Err(Error::Precondition(format!(
            "validation set of {} rows is too short for window {}",
            val_set.len(),
            hyper.window
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = NeuralModel::initialize(dims, hyper.hidden_dim, hyper.loss_weights, &mut rng)?;
    let mut adam = AdamState::new(&model.params, hyper.learning_rate);
    let mut order: Vec<usize> = (0..views.len()).collect();
    let mut history = Vec::with_capacity(hyper.epochs);

    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(hyper.batch_size) {
            let (loss, mut grad) = batch_gradient(&model, &views, batch);
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("non-finite loss in epoch {}", epoch + 1)));
            }
            epoch_loss += loss;
            grad.scale(1.0 / batch.len() as f64);
            adam.update(&mut model.params, &grad);
        }
        history.push(epoch_loss / views.len() as f64);
    }

    let noise = estimate_noise(&model, val_set)?;
    Ok(TrainOutcome {
        model,
        noise,
        loss_history: history,
    })
}

fn batch_gradient(model: &NeuralModel, views: &[WindowView], batch: &[usize]) -> (f64, Gradient) {
    let parts: Vec<(f64, Gradient)> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut grad = model.params.zeros_like();
            let loss = chunk
                .iter()
                .map(|&i| model.backward_item(&views[i], &mut grad))
                .sum::<f64>();
            (loss, grad)
        })
        .collect();
    let mut iter = parts.into_iter();
    let (mut loss, mut grad) = iter.next().expect("batch is non-empty");
    for (l, g) in iter {
        loss += l;
        grad.add_assign(&g);
    }
    (loss, grad)
}

/// Noise covariances from validation residuals
/// `q[t] = enc(W[t]) - trans(enc(W[t-1]), W[t-1])` and
/// `r[t] = x[t] - dec(enc(W[t]))`, where `W[t]` is the window ending at `t`.
pub fn estimate_noise(model: &NeuralModel, val_set: &Dataset) -> Result<NoiseEstimate> {
    let tau = model.dims.window;
    if val_set.num_features() != model.dims.sensors {
        return Err(Error::Shape(format!(
            "validation set has {} features, model expects {}",
            val_set.num_features(),
            model.dims.sensors
        )));
    }
    if val_set.len() <= tau {
        return Err(Error::Precondition(format!(
            "validation set of {} rows is too short for window {tau}",
            val_set.len()
        )));
    }
    let windows: Vec<DMatrix<f64>> = (tau..=val_set.len())
        .map(|end| val_set.window_before(end, tau))
        .collect::<Result<_>>()?;
    let latents: Vec<DVector<f64>> = windows
        .iter()
        .map(|w| model.encode(w))
        .collect::<Result<_>>()?;

    let mut r = Vec::with_capacity(windows.len());
    for (k, z) in latents.iter().enumerate() {
        let t = tau - 1 + k;
        r.push(val_set.row(t) - model.decode(z)?);
    }
    let mut q = Vec::with_capacity(windows.len().saturating_sub(1));
    for k in 1..latents.len() {
        q.push(&latents[k] - model.transition(&latents[k - 1], &windows[k - 1])?);
    }
    if q.len() < 2 {
        return Err(Error::Precondition(format!(
            "noise estimation needs at least 2 residuals, validation set gives {}",
            q.len()
        )));
    }
    Ok(NoiseEstimate {
        q: clamp_psd(&sample_covariance(&q)?),
        r: clamp_psd(&sample_covariance(&r)?),
    })
}
