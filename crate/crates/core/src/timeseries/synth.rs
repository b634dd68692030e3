//! Labelled synthetic series from a stable linear latent system.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Dataset;
use crate::error::{Error, Result};

const SPECTRAL_RADIUS: f64 = 0.95;
const BURN_IN: usize = 200;
const SPIKE_SIZE: f64 = 8.0;
const SHIFT_SIZE: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnomalyKind {
    /// One randomly chosen sensor per step jumps by `8 * noise_scale`.
    Spike,
    /// Every sensor is offset by `4 * noise_scale`.
    MeanShift,
}

impl AnomalyKind {
    pub fn name(self) -> &'static str {
        match self {
            AnomalyKind::Spike => "spike",
            AnomalyKind::MeanShift => "mean_shift",
        }
    }
}

impl std::str::FromStr for AnomalyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spike" => Ok(AnomalyKind::Spike),
            "mean_shift" => Ok(AnomalyKind::MeanShift),
            other => Err(Error::Config(format!("unknown anomaly kind \"{other}\""))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnomalySegment {
    pub start: usize,
    pub length: usize,
    pub kind: AnomalyKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub latent_dim: usize,
    pub num_sensors: usize,
    pub length: usize,
    pub anomaly_segments: Vec<AnomalySegment>,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    /// 10,000 normal rows followed by 4,000 rows carrying five segments.
    fn default() -> Self {
        use AnomalyKind::*;
        let seg = |start, length, kind| AnomalySegment { start, length, kind };
        Self {
            latent_dim: 3,
            num_sensors: 8,
            length: 14_000,
            anomaly_segments: vec![
                seg(10_500, 80, Spike),
                seg(11_200, 100, MeanShift),
                seg(12_000, 60, Spike),
                seg(12_700, 120, MeanShift),
                seg(13_400, 90, Spike),
            ],
            noise_scale: 0.1,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.num_sensors == 0 || self.length == 0 {
            return Err(Error::Config(
                "latent_dim, num_sensors and length must be positive".into(),
            ));
        }
        if !(self.noise_scale > 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Config(format!("noise_scale {} must be positive", self.noise_scale)));
        }
        let mut segs = self.anomaly_segments.clone();
        segs.sort_by_key(|s| s.start);
        for s in &segs {
            if s.length == 0 || s.start + s.length > self.length {
                return Err(Error::Precondition(format!(
                    "segment ({}, {}, {}) outside [0, {})",
                    s.start,
                    s.length,
                    s.kind.name(),
                    self.length
                )));
            }
        }
        for pair in segs.windows(2) {
            if pair[0].start + pair[0].length > pair[1].start {
                return Err(Error::Precondition(format!(
                    "segments starting at {} and {} overlap",
                    pair[0].start, pair[1].start
                )));
            }
        }
        Ok(())
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max)
}

pub fn synth_generate(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let (k, m, t_len) = (config.latent_dim, config.num_sensors, config.length);
    let s = config.noise_scale;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut a = gaussian_matrix(&mut rng, k, k);
    let rho = spectral_radius(&a);
    if rho > 0.0 {
        a *= SPECTRAL_RADIUS / rho;
    }
    let c = gaussian_matrix(&mut rng, m, k);

    let mut z = DVector::zeros(k);
    let step = |z: &mut DVector<f64>, rng: &mut ChaCha8Rng| {
        let eps = DVector::from_fn(k, |_, _| s * rng.sample::<f64, _>(StandardNormal));
        *z = &a * &*z + eps;
    };
    for _ in 0..BURN_IN {
        step(&mut z, &mut rng);
    }

    let mut values = DMatrix::zeros(t_len, m);
    let mut labels = vec![false; t_len];
    for t in 0..t_len {
        step(&mut z, &mut rng);
        let eta = DVector::from_fn(m, |_, _| 0.5 * s * rng.sample::<f64, _>(StandardNormal));
        let x = &c * &z + eta;
        values.row_mut(t).copy_from(&x.transpose());
    }

    for seg in &config.anomaly_segments {
        for t in seg.start..seg.start + seg.length {
            labels[t] = true;
            match seg.kind {
                AnomalyKind::Spike => {
                    let j = rng.random_range(0..m);
                    values[(t, j)] += SPIKE_SIZE * s;
                }
                AnomalyKind::MeanShift => {
                    for j in 0..m {
                        values[(t, j)] += SHIFT_SIZE * s;
                    }
                }
            }
        }
    }

    Dataset::from_values(values, Some(labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(segments: Vec<AnomalySegment>) -> SynthConfig {
        SynthConfig {
            latent_dim: 2,
            num_sensors: 3,
            length: 300,
            anomaly_segments: segments,
            noise_scale: 0.5,
            seed: 11,
        }
    }

    #[test]
    fn no_segments_all_normal() {
        let d = synth_generate(&small(vec![])).unwrap();
        assert_eq!(d.len(), 300);
        assert!(d.labels().unwrap().iter().all(|&l| !l));
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = SynthConfig::default();
        let a = synth_generate(&cfg).unwrap();
        let b = synth_generate(&cfg).unwrap();
        let bits = |d: &Dataset| d.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.labels(), b.labels());
    }

    #[test]
    fn mean_shift_raises_sensor_mean() {
        let seg = AnomalySegment {
            start: 100,
            length: 20,
            kind: AnomalyKind::MeanShift,
        };
        let cfg = small(vec![seg]);
        let d = synth_generate(&cfg).unwrap();
        let col = d.values().column(0);
        let before = col.rows(0, 100).mean();
        let during = col.rows(100, 20).mean();
        assert!(during - before >= 2.0 * cfg.noise_scale, "{during} vs {before}");
    }

    #[test]
    fn labels_exactly_on_segments() {
        let segs = vec![
            AnomalySegment { start: 10, length: 5, kind: AnomalyKind::Spike },
            AnomalySegment { start: 200, length: 100, kind: AnomalyKind::MeanShift },
        ];
        let d = synth_generate(&small(segs)).unwrap();
        let labels = d.labels().unwrap();
        for (t, &l) in labels.iter().enumerate() {
            assert_eq!(l, (10..15).contains(&t) || (200..300).contains(&t), "t={t}");
        }
    }

    #[test]
    fn rejects_bad_segments() {
        let out = small(vec![AnomalySegment { start: 290, length: 20, kind: AnomalyKind::Spike }]);
        assert!(matches!(synth_generate(&out), Err(Error::Precondition(_))));
        let overlap = small(vec![
            AnomalySegment { start: 10, length: 10, kind: AnomalyKind::Spike },
            AnomalySegment { start: 15, length: 10, kind: AnomalyKind::Spike },
        ]);
        assert!(synth_generate(&overlap).is_err());
    }

    #[test]
    fn latent_system_is_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut a = gaussian_matrix(&mut rng, 4, 4);
        a *= SPECTRAL_RADIUS / spectral_radius(&a);
        assert!((spectral_radius(&a) - SPECTRAL_RADIUS).abs() < 1e-9);
    }
}
