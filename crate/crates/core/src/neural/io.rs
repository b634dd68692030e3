//! Plain-text model files.
//!
//! ```text
//! bssad-model 1
//! dims <sensors> <latent> <window>
//! loss_weights <a1> <a2> <a3>
//! layers encoder tanh linear
//! layers decoder tanh linear
//! layers transition tanh linear
//! feature <name>                  (optional, one line per feature)
//! normalizer <fitted_on>          (optional)
//! tensor <name> <rows> <cols>
//! <rows*cols values, row-major, space separated>
//! ...
//! ```
//!
//! Values are written with the shortest representation that parses back to
//! the same `f64`, so a round trip is bit-exact.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::{
    Activation, Dims, Gate, LayerParams, LossWeights, NetParams, NeuralModel, NoiseEstimate,
    RecurrentCellParams, GATE_NAMES,
};
use crate::error::{Error, Result};
use crate::timeseries::NormalizationStats;

const MAGIC: &str = "bssad-model";
const VERSION: u32 = 1;

/// Everything the detector needs besides the data: the network, its noise
/// covariances and, optionally, the training schema and normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub model: NeuralModel,
    pub noise: NoiseEstimate,
    pub normalizer: Option<NormalizationStats>,
    pub feature_names: Option<Vec<String>>,
}

pub fn save_model(model: &NeuralModel, noise: &NoiseEstimate, path: impl AsRef<Path>) -> Result<()> {
    save_bundle(
        &ModelBundle {
            model: model.clone(),
            noise: noise.clone(),
            normalizer: None,
            feature_names: None,
        },
        path,
    )
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(NeuralModel, NoiseEstimate)> {
    let b = load_bundle(path)?;
    Ok((b.model, b.noise))
}

pub fn save_bundle(bundle: &ModelBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, render(bundle)).map_err(|e| Error::io(path, e))
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<ModelBundle> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text)
}

fn push_tensor(out: &mut String, name: &str, rows: usize, cols: usize, at: impl Fn(usize, usize) -> f64) {
    let _ = writeln!(out, "tensor {name} {rows} {cols}");
    let mut first = true;
    for r in 0..rows {
        for c in 0..cols {
            if !first {
                out.push(' ');
            }
            first = false;
            let _ = write!(out, "{}", at(r, c));
        }
    }
    out.push('\n');
}

fn render(bundle: &ModelBundle) -> String {
    let m = &bundle.model;
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC} {VERSION}");
    let _ = writeln!(out, "dims {} {} {}", m.dims.sensors, m.dims.latent, m.dims.window);
    let w = &m.loss_weights;
    let _ = writeln!(out, "loss_weights {} {} {}", w.reconstruction, w.prediction, w.smoothness);
    for (group, layers) in [
        ("encoder", &m.params.encoder),
        ("decoder", &m.params.decoder),
        ("transition", &m.params.transition),
    ] {
        let acts: Vec<&str> = layers.iter().map(|l| l.activation.name()).collect();
        let _ = writeln!(out, "layers {group} {}", acts.join(" "));
    }
    if let Some(names) = &bundle.feature_names {
        for n in names {
            let _ = writeln!(out, "feature {n}");
        }
    }
    if let Some(norm) = &bundle.normalizer {
        let _ = writeln!(out, "normalizer {}", norm.fitted_on);
    }

    for t in m.params.tensors() {
        // stored column-major
        push_tensor(&mut out, &t.name, t.rows, t.cols, |r, c| t.data[c * t.rows + r]);
    }
    for (name, mat) in [("noise.q", &bundle.noise.q), ("noise.r", &bundle.noise.r)] {
        push_tensor(&mut out, name, mat.nrows(), mat.ncols(), |r, c| mat[(r, c)]);
    }
    if let Some(norm) = &bundle.normalizer {
        push_tensor(&mut out, "norm.min", 1, norm.min.len(), |_, c| norm.min[c]);
        push_tensor(&mut out, "norm.max", 1, norm.max.len(), |_, c| norm.max[c]);
    }
    out
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::ModelFormat(msg.into())
}

fn parse_num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse().map_err(|_| fmt_err(format!("cannot parse {what} from \"{s}\"")))
}

fn parse(text: &str) -> Result<ModelBundle> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| fmt_err("empty file"))?;
    match header.split_whitespace().collect::<Vec<_>>().as_slice() {
        [magic, v] if *magic == MAGIC && *v == VERSION.to_string() => {}
        _ => {
            return Err(fmt_err(format!(
                "unsupported header \"{header}\", expected \"{MAGIC} {VERSION}\""
            )))
        }
    }

    let mut dims = None;
    let mut weights = None;
    let mut layer_acts: HashMap<String, Vec<Activation>> = HashMap::new();
    let mut features = Vec::new();
    let mut fitted_on = None;
    let mut tensors: HashMap<String, DMatrix<f64>> = HashMap::new();

    while let Some(line) = lines.next() {
        if line.trim().is_empty() {
            continue;
        }
        let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
        let parts: Vec<&str> = rest.split_whitespace().collect();
        match key {
            "dims" => {
                if parts.len() != 3 {
                    return Err(fmt_err("dims needs 3 values"));
                }
                dims = Some(Dims {
                    sensors: parse_num(parts[0], "sensors")?,
                    latent: parse_num(parts[1], "latent")?,
                    window: parse_num(parts[2], "window")?,
                });
            }
            "loss_weights" => {
                if parts.len() != 3 {
                    return Err(fmt_err("loss_weights needs 3 values"));
                }
                weights = Some(LossWeights {
                    reconstruction: parse_num(parts[0], "alpha1")?,
                    prediction: parse_num(parts[1], "alpha2")?,
                    smoothness: parse_num(parts[2], "alpha3")?,
                });
            }
            "layers" => {
                let (group, acts) = parts.split_first().ok_or_else(|| fmt_err("layers line without group"))?;
                let acts = acts
                    .iter()
                    .map(|a| Activation::parse(a).ok_or_else(|| fmt_err(format!("unknown activation \"{a}\""))))
                    .collect::<Result<Vec<_>>>()?;
                layer_acts.insert(group.to_string(), acts);
            }
            "feature" => features.push(rest.to_string()),
            "normalizer" => fitted_on = Some(rest.to_string()),
            "tensor" => {
                if parts.len() != 3 {
                    return Err(fmt_err(format!("malformed tensor line \"{line}\"")));
                }
                let name = parts[0].to_string();
                let rows: usize = parse_num(parts[1], "rows")?;
                let cols: usize = parse_num(parts[2], "cols")?;
                let data_line = lines
                    .next()
                    .ok_or_else(|| fmt_err(format!("truncated file: no values for tensor {name}")))?;
                let values = data_line
                    .split_whitespace()
                    .map(|v| parse_num::<f64>(v, &format!("value of tensor {name}")))
                    .collect::<Result<Vec<_>>>()?;
                if values.len() != rows * cols {
                    return Err(Error::Shape(format!(
                        "tensor {name} declared {rows}x{cols} but lists {} values",
                        values.len()
                    )));
                }
                tensors.insert(name, DMatrix::from_row_slice(rows, cols, &values));
            }
            other => return Err(fmt_err(format!("unknown key \"{other}\""))),
        }
    }

    let dims = dims.ok_or_else(|| fmt_err("missing dims line"))?;
    let loss_weights = weights.ok_or_else(|| fmt_err("missing loss_weights line"))?;
    let mut take = |name: &str| {
        tensors
            .remove(name)
            .ok_or_else(|| fmt_err(format!("truncated file: missing tensor {name}")))
    };
    let column = |m: DMatrix<f64>, name: &str| -> Result<DVector<f64>> {
        if m.ncols() != 1 {
            return Err(Error::Shape(format!("tensor {name} must be a column")));
        }
        Ok(m.column(0).into_owned())
    };

    let mut groups = Vec::new();
    for group in ["encoder", "decoder", "transition"] {
        let acts = layer_acts
            .get(group)
            .ok_or_else(|| fmt_err(format!("missing layers line for {group}")))?;
        let mut layers = Vec::new();
        for (i, &activation) in acts.iter().enumerate() {
            let w = take(&format!("{group}.{i}.weights"))?;
            let bname = format!("{group}.{i}.biases");
            let b = column(take(&bname)?, &bname)?;
            layers.push(LayerParams {
                weights: w,
                biases: b,
                activation,
            });
        }
        groups.push(layers);
    }
    let mut gates = Vec::new();
    for g in GATE_NAMES {
        let weights = take(&format!("lstm.{g}.weights"))?;
        let bname = format!("lstm.{g}.biases");
        let biases = column(take(&bname)?, &bname)?;
        gates.push(Gate { weights, biases });
    }
    let [input, forget, output, candidate]: [Gate; 4] =
        gates.try_into().expect("four gates parsed");
    let transition = groups.pop().unwrap();
    let decoder = groups.pop().unwrap();
    let encoder = groups.pop().unwrap();

    let model = NeuralModel::from_parts(
        NetParams {
            encoder,
            decoder,
            lstm: RecurrentCellParams {
                input,
                forget,
                output,
                candidate,
            },
            transition,
        },
        dims,
        loss_weights,
    )?;

    let q = take("noise.q")?;
    let r = take("noise.r")?;
    if q.shape() != (dims.latent, dims.latent) || r.shape() != (dims.sensors, dims.sensors) {
        return Err(Error::Shape(format!(
            "noise covariances are {:?} and {:?}, expected {}x{} and {}x{}",
            q.shape(),
            r.shape(),
            dims.latent,
            dims.latent,
            dims.sensors,
            dims.sensors
        )));
    }

    let normalizer = match fitted_on {
        Some(fitted_on) => {
            let min = take("norm.min")?;
            let max = take("norm.max")?;
            if min.len() != dims.sensors || max.len() != dims.sensors {
                return Err(Error::Shape("normalizer length differs from sensor count".into()));
            }
            Some(NormalizationStats {
                min: min.iter().copied().collect(),
                max: max.iter().copied().collect(),
                fitted_on,
            })
        }
        None => None,
    };
    if !tensors.is_empty() {
        let mut extra: Vec<_> = tensors.keys().cloned().collect();
        extra.sort();
        return Err(fmt_err(format!("unexpected tensors: {}", extra.join(", "))));
    }
    if !features.is_empty() && features.len() != dims.sensors {
        return Err(Error::Shape(format!(
            "{} feature names for {} sensors",
            features.len(),
            dims.sensors
        )));
    }

    Ok(ModelBundle {
        model,
        noise: NoiseEstimate { q, r },
        normalizer,
        feature_names: (!features.is_empty()).then_some(features),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bundle() -> ModelBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dims = Dims {
            sensors: 3,
            latent: 2,
            window: 2,
        };
        let model = NeuralModel::initialize(dims, 5, LossWeights::default(), &mut rng).unwrap();
        ModelBundle {
            model,
            noise: NoiseEstimate {
                q: DMatrix::from_row_slice(2, 2, &[0.1, 1e-17, 1e-17, 0.3]),
                r: DMatrix::identity(3, 3) * (1.0 / 3.0),
            },
            normalizer: Some(NormalizationStats {
                min: vec![-1.5, 0.0, 2.0],
                max: vec![1.0, 0.1, 2.0],
                fitted_on: "train".into(),
            }),
            feature_names: Some(vec!["a".into(), "b c".into(), "d".into()]),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let b = bundle();
        let parsed = parse(&render(&b)).unwrap();
        assert_eq!(parsed, b);
        for (x, y) in b.model.params.tensors().iter().zip(parsed.model.params.tensors()) {
            assert_eq!(x.name, y.name);
            let bx: Vec<u64> = x.data.iter().map(|v| v.to_bits()).collect();
            let by: Vec<u64> = y.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bx, by);
        }
    }

    #[test]
    fn save_and_load_files() {
        let b = bundle();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_model(&b.model, &b.noise, f.path()).unwrap();
        let (m, n) = load_model(f.path()).unwrap();
        assert_eq!(m, b.model);
        assert_eq!(n, b.noise);
    }

    #[test]
    fn corrupted_header() {
        let text = render(&bundle()).replacen("bssad-model 1", "bssad-model 9", 1);
        let err = parse(&text).unwrap_err();
        assert!(matches!(err, Error::ModelFormat(_)));
        assert!(err.to_string().contains("unsupported"));
    }

    #[test]
    fn short_tensor_names_it() {
        let mut text = render(&bundle());
        text.push_str("tensor extra.sq 2 2\n1 2 3\n");
        let err = parse(&text).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
        assert!(err.to_string().contains("extra.sq"), "{err}");
    }

    #[test]
    fn truncated_file() {
        let text = render(&bundle());
        let cut: String = text.lines().take(12).collect::<Vec<_>>().join("\n");
        assert!(parse(&cut).is_err());
        let no_values = text.lines().take_while(|l| !l.starts_with("tensor")).collect::<Vec<_>>().join("\n")
            + "\ntensor encoder.0.weights 5 4\n";
        assert!(parse(&no_values).unwrap_err().to_string().contains("truncated"));
    }
}
