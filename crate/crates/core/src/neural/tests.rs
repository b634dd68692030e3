use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::timeseries::{make_windows, Dataset};

fn identity_layer(n: usize) -> LayerParams {
    LayerParams {
        weights: DMatrix::identity(n, n),
        biases: DVector::zeros(n),
        activation: Activation::Linear,
    }
}

/// tau = 1, M = M' = 2, identity encoder/decoder, transition copies z_prev.
fn identity_model(hidden: usize) -> NeuralModel {
    let mut route = LayerParams::zeros(2 + hidden, 2, Activation::Linear);
    route.weights[(0, 0)] = 1.0;
    route.weights[(1, 1)] = 1.0;
    NeuralModel::from_parts(
        NetParams {
            encoder: vec![identity_layer(2)],
            decoder: vec![identity_layer(2)],
            lstm: RecurrentCellParams::zeros(2, hidden),
            transition: vec![route],
        },
        Dims {
            sensors: 2,
            latent: 2,
            window: 1,
        },
        LossWeights::default(),
    )
    .unwrap()
}

fn zero_model(dims: Dims, hidden: usize) -> NeuralModel {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut m = NeuralModel::initialize(dims, hidden, LossWeights::default(), &mut rng).unwrap();
    for t in m.params.tensors_mut() {
        t.fill(0.0);
    }
    m
}

fn view(past: &[f64], rows: usize, current: &[f64]) -> WindowView {
    let cols = current.len();
    WindowView {
        past: DMatrix::from_row_slice(rows, cols, past),
        current: DVector::from_row_slice(current),
        index: rows,
    }
}

#[test]
fn encode_identity_and_zero() {
    let m = identity_model(3);
    let w = DMatrix::from_row_slice(1, 2, &[3.0, 4.0]);
    assert_eq!(m.encode(&w).unwrap().as_slice(), &[3.0, 4.0]);

    let dims = Dims { sensors: 2, latent: 2, window: 3 };
    let z = zero_model(dims, 4).encode(&DMatrix::from_element(3, 2, 7.0)).unwrap();
    assert!(z.iter().all(|&v| v == 0.0));
}

#[test]
fn encode_tanh_all_ones() {
    let layer = LayerParams {
        weights: DMatrix::from_element(2, 2, 1.0),
        biases: DVector::zeros(2),
        activation: Activation::Tanh,
    };
    let mut m = identity_model(1);
    m.params.encoder = vec![layer];
    let z = m.encode(&DMatrix::zeros(1, 2)).unwrap();
    assert_eq!(z.as_slice(), &[0.0, 0.0]);
    let z = m.encode(&DMatrix::from_row_slice(1, 2, &[0.25, 0.25])).unwrap();
    assert!((z[0] - 0.5f64.tanh()).abs() < 1e-15);
}

#[test]
fn encode_rejects_shape() {
    let m = identity_model(1);
    assert!(matches!(m.encode(&DMatrix::zeros(2, 2)), Err(Error::Shape(_))));
    assert!(matches!(m.decode(&DVector::zeros(3)), Err(Error::Shape(_))));
}

#[test]
fn decode_cases() {
    let mut m = identity_model(1);
    let z = DVector::from_vec(vec![1.0, 1.0]);
    assert_eq!(m.decode(&z).unwrap(), z);
    m.params.decoder[0].weights = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0]);
    assert_eq!(m.decode(&z).unwrap().as_slice(), &[2.0, 3.0]);
    m.params.decoder[0].weights.fill(0.0);
    assert_eq!(m.decode(&z).unwrap().as_slice(), &[0.0, 0.0]);
}

#[test]
fn transition_zero_and_identity_routing() {
    let dims = Dims { sensors: 2, latent: 2, window: 2 };
    let z_prev = DVector::from_vec(vec![0.3, -1.2]);
    let w = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
    let out = zero_model(dims, 3).transition(&z_prev, &w).unwrap();
    assert!(out.iter().all(|&v| v == 0.0));

    let mut m = identity_model(3);
    // LSTM with nonzero weights must not leak through zeroed columns
    m.params.lstm.candidate.weights.fill(0.7);
    m.params.lstm.input.biases.fill(1.0);
    let w1 = DMatrix::from_row_slice(1, 2, &[5.0, -5.0]);
    assert_eq!(m.transition(&z_prev, &w1).unwrap(), z_prev);
}

#[test]
fn lstm_single_step_hand_trace() {
    // 1-D input, 1 hidden unit, one step from h = c = 0:
    // gate pre-activations are w_x * x + b (the hidden weight sees h = 0).
    let mut cell = RecurrentCellParams::zeros(1, 1);
    cell.input.weights[(0, 0)] = 0.5;
    cell.input.biases[0] = 0.1;
    cell.forget.weights[(0, 0)] = -0.3;
    cell.output.weights[(0, 0)] = 1.0;
    cell.output.biases[0] = -0.2;
    cell.candidate.weights[(0, 0)] = 2.0;
    cell.candidate.weights[(0, 1)] = 9.0;
    let x = 0.8;
    let (h, _) = lstm_forward(&cell, &DMatrix::from_element(1, 1, x));

    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let i = sig(0.5 * x + 0.1);
    let o = sig(x - 0.2);
    let g = (2.0 * x).tanh();
    let c = i * g; // forget gate multiplies c = 0
    let expected = o * c.tanh();
    assert!((h[0] - expected).abs() < 1e-15, "{} vs {expected}", h[0]);
    assert!((expected - 0.334_496_624_3).abs() < 1e-9);
}

#[test]
fn loss_zero_for_perfect_constant_model() {
    let m = identity_model(2);
    let batch = vec![view(&[1.0, 2.0], 1, &[1.0, 2.0]), view(&[-3.0, 0.5], 1, &[-3.0, 0.5])];
    assert_eq!(m.loss(&batch).unwrap(), 0.0);
    let (l, g) = m.gradient(&batch).unwrap();
    assert_eq!(l, 0.0);
    assert!(g.tensors().iter().all(|t| t.data.iter().all(|&v| v == 0.0)));
}

#[test]
fn loss_prediction_term_only() {
    let mut m = identity_model(2);
    m.loss_weights = LossWeights {
        reconstruction: 0.0,
        prediction: 0.45,
        smoothness: 0.0,
    };
    // x[t] - x_hat[t] = [1, 1]
    let batch = vec![view(&[0.0, 0.0], 1, &[1.0, 1.0])];
    assert!((m.loss(&batch).unwrap() - 0.9).abs() < 1e-15);
    assert!(m.loss(&[]).is_err());
}

#[test]
fn default_loss_weights() {
    let w = LossWeights::default();
    assert_eq!((w.reconstruction, w.prediction, w.smoothness), (0.45, 0.45, 0.45));
}

fn random_model(rng: &mut ChaCha8Rng) -> (NeuralModel, Vec<WindowView>) {
    let sensors = rng.random_range(1..=4);
    let window = rng.random_range(1..=3);
    let latent = rng.random_range(1..=3.min(window * sensors));
    let hidden = rng.random_range(1..=4);
    let dims = Dims { sensors, latent, window };
    let mut model = NeuralModel::initialize(dims, hidden, LossWeights::default(), rng).unwrap();
    // larger weights exercise the nonlinearities
    for t in model.params.tensors_mut() {
        for v in t.iter_mut() {
            *v *= 1.5;
        }
    }
    let t_len = window + 3;
    let values = DMatrix::from_fn(t_len, sensors, |_, _| rng.random_range(-1.0..1.0));
    let data = Dataset::from_values(values, None).unwrap();
    let views = make_windows(&data, window).unwrap().collect();
    (model, views)
}

/// Central differences on every coordinate, independent of the backward pass.
fn finite_difference(model: &NeuralModel, batch: &[WindowView], step: f64) -> Vec<Vec<f64>> {
    let mut probe = model.clone();
    let shapes: Vec<usize> = model.params.tensors().iter().map(|t| t.data.len()).collect();
    let mut out = Vec::new();
    for (ti, &len) in shapes.iter().enumerate() {
        let mut g = vec![0.0; len];
        for (k, gk) in g.iter_mut().enumerate() {
            let orig = probe.params.tensors_mut()[ti][k];
            probe.params.tensors_mut()[ti][k] = orig + step;
            let up = probe.loss(batch).unwrap();
            probe.params.tensors_mut()[ti][k] = orig - step;
            let down = probe.loss(batch).unwrap();
            probe.params.tensors_mut()[ti][k] = orig;
            *gk = (up - down) / (2.0 * step);
        }
        out.push(g);
    }
    out
}

/// First coordinate (magnitude above 1e-8) whose relative error exceeds 1e-4.
pub(crate) fn gradient_mismatch(analytic: &Gradient, numeric: &[Vec<f64>]) -> Option<String> {
    for (t, fd) in analytic.tensors().iter().zip(numeric) {
        for (k, (&a, &n)) in t.data.iter().zip(fd).enumerate() {
            let scale = a.abs().max(n.abs());
            if scale <= 1e-8 {
                continue;
            }
            let rel = (a - n).abs() / scale;
            if rel > 1e-4 {
                return Some(format!("{}[{k}]: analytic {a} vs numeric {n} (rel {rel})", t.name));
            }
        }
    }
    None
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..5 {
        let (model, batch) = random_model(&mut rng);
        let (loss, grad) = model.gradient(&batch).unwrap();
        assert!((loss - model.loss(&batch).unwrap()).abs() < 1e-12);
        let fd = finite_difference(&model, &batch, 1e-5);
        if let Some(msg) = gradient_mismatch(&grad, &fd) {
            panic!("{msg}");
        }
    }
}

#[test]
fn gradient_mirrors_parameter_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (model, batch) = random_model(&mut rng);
    let (_, grad) = model.gradient(&batch).unwrap();
    let a: Vec<_> = model.params.tensors().iter().map(|t| (t.name.clone(), t.rows, t.cols)).collect();
    let b: Vec<_> = grad.tensors().iter().map(|t| (t.name.clone(), t.rows, t.cols)).collect();
    assert_eq!(a, b);
}

#[test]
fn inference_is_pure() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (model, batch) = random_model(&mut rng);
    let v = &batch[0];
    let z1 = model.encode(&v.past).unwrap();
    let z2 = model.encode(&v.past).unwrap();
    assert_eq!(z1, z2);
    assert_eq!(model.transition(&z1, &v.past).unwrap(), model.transition(&z2, &v.past).unwrap());
    assert_eq!(model.decode(&z1).unwrap(), model.decode(&z2).unwrap());
}

#[test]
fn from_parts_rejects_bad_shapes() {
    let mut m = identity_model(2);
    m.params.decoder[0].weights = DMatrix::zeros(3, 2);
    assert!(NeuralModel::from_parts(m.params, m.dims, m.loss_weights).is_err());
    let m = identity_model(2);
    let dims = Dims { sensors: 2, latent: 3, window: 1 };
    assert!(NeuralModel::from_parts(m.params, dims, m.loss_weights).is_err());
}

fn noisy_series(t_len: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = DMatrix::from_fn(t_len, 2, |t, j| {
        (t as f64 * 0.1 + j as f64).sin() * 0.4 + 0.5 + 0.02 * rng.random_range(-1.0..1.0)
    });
    Dataset::from_values(values, Some(vec![false; t_len])).unwrap()
}

fn small_hyper(epochs: usize) -> Hyperparameters {
    Hyperparameters {
        window: 3,
        latent_dim: 2,
        hidden_dim: 8,
        epochs,
        learning_rate: 5e-3,
        batch_size: 16,
        loss_weights: LossWeights::default(),
    }
}

#[test]
fn training_reduces_loss() {
    let out = train(&noisy_series(300, 1), &noisy_series(100, 2), &small_hyper(5), 17).unwrap();
    assert_eq!(out.loss_history.len(), 5);
    assert!(out.loss_history.iter().all(|l| l.is_finite()));
    assert!(out.loss_history[4] <= out.loss_history[0]);
}

#[test]
fn training_is_deterministic() {
    let a = train(&noisy_series(120, 1), &noisy_series(40, 2), &small_hyper(2), 5).unwrap();
    let b = train(&noisy_series(120, 1), &noisy_series(40, 2), &small_hyper(2), 5).unwrap();
    let bits = |m: &NeuralModel| -> Vec<u64> {
        m.params.tensors().iter().flat_map(|t| t.data.iter().map(|v| v.to_bits())).collect()
    };
    assert_eq!(bits(&a.model), bits(&b.model));
    assert_eq!(a.noise, b.noise);
}

#[test]
fn zero_epochs_returns_initial_model() {
    let hyper = small_hyper(0);
    let out = train(&noisy_series(60, 1), &noisy_series(30, 2), &hyper, 8).unwrap();
    assert!(out.loss_history.is_empty());
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let dims = Dims { sensors: 2, latent: 2, window: 3 };
    let init = NeuralModel::initialize(dims, 8, LossWeights::default(), &mut rng).unwrap();
    assert_eq!(out.model, init);
}

#[test]
fn training_rejects_anomalous_or_empty() {
    let mut labels = vec![false; 50];
    labels[10] = true;
    let bad = Dataset::from_values(noisy_series(50, 1).values().clone(), Some(labels)).unwrap();
    assert!(matches!(
        train(&bad, &noisy_series(30, 2), &small_hyper(1), 0),
        Err(Error::Precondition(_))
    ));
    let empty = noisy_series(50, 1).slice_rows(0, 0).unwrap();
    assert!(train(&empty, &noisy_series(30, 2), &small_hyper(1), 0).is_err());
}

#[test]
fn noise_from_perfect_reconstruction_is_zero_r() {
    let m = identity_model(2);
    let est = estimate_noise(&m, &noisy_series(50, 4)).unwrap();
    assert!(est.r.iter().all(|&v| v == 0.0));
    assert_eq!(est.q.shape(), (2, 2));
}

#[test]
fn noise_covariance_hand_case() {
    // Constant-zero encoder and decoder: r[t] = x[t], and with two rows
    // x = [1, 0], [-1, 0] the residual covariance is [[2, 0], [0, 0]].
    let mut m = identity_model(1);
    m.params.encoder[0].weights.fill(0.0);
    m.params.decoder[0].weights.fill(0.0);
    let data = Dataset::from_values(
        DMatrix::from_row_slice(3, 2, &[1.0, 0.0, -1.0, 0.0, 1.0, 0.0]),
        None,
    )
    .unwrap();
    let est = estimate_noise(&m, &data).unwrap();
    // three residuals here: mean 1/3, covariance (2 * (2/3)^2 + (4/3)^2) / 2
    assert!((est.r[(0, 0)] - 4.0 / 3.0).abs() < 1e-12);
    let two = data.slice_rows(0, 2).unwrap();
    let pts = vec![two.row(0), two.row(1)];
    let c = crate::linalg::sample_covariance(&pts).unwrap();
    assert_eq!(c, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]));
}

#[test]
fn noise_is_symmetric_and_needs_residuals() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (model, _) = random_model(&mut rng);
    let tau = model.dims.window;
    let values = DMatrix::from_fn(tau + 20, model.dims.sensors, |_, _| rng.random_range(-1.0..1.0));
    let data = Dataset::from_values(values, None).unwrap();
    let est = estimate_noise(&model, &data).unwrap();
    for m in [&est.q, &est.r] {
        assert!((m - m.transpose()).abs().max() <= 1e-12);
        let eig = nalgebra::SymmetricEigen::new(m.clone());
        assert!(eig.eigenvalues.iter().all(|&v| v >= -1e-10));
    }
    let short = data.slice_rows(0, tau + 1).unwrap();
    assert!(matches!(estimate_noise(&model, &short), Err(Error::Precondition(_))));
}
