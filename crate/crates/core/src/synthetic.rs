//! Seeded generators for two synthetic systems: a 2-D rotation with a
//! linearly increasing angle, and a 3-class growth/decay system driven by a
//! random non-negative matrix scaled to unit spectral radius.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::rng::{rng_from_seed, standard_normal_vec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationSeriesSpec {
    pub steps: usize,
    pub theta_start: f64,
    pub theta_end: f64,
    pub x1: [f64; 2],
    pub sigma: f64,
    pub seed: u64,
}

impl Default for RotationSeriesSpec {
    fn default() -> Self {
        Self {
            steps: 500,
            theta_start: std::f64::consts::PI / 64.0,
            theta_end: std::f64::consts::PI / 8.0,
            x1: [1.0, 0.0],
            sigma: 0.05,
            seed: 0,
        }
    }
}

impl RotationSeriesSpec {
    /// Rotation angle applied on the transition from step `k` to `k + 1`
    /// (1-based).
    pub fn theta(&self, k: usize) -> f64 {
        if self.steps < 2 {
            return self.theta_start;
        }
        self.theta_start + (k as f64 - 1.0) * (self.theta_end - self.theta_start) / (self.steps as f64 - 1.0)
    }
}

/// Truth, noisy observations and the per-step parameter path (rotation
/// angle or growth factor), all indexed from step 1 at position 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSeries {
    pub truth: Vec<DVector<f64>>,
    pub noisy: Vec<DVector<f64>>,
    pub parameter: Vec<f64>,
}

impl SyntheticSeries {
    /// One row per step: `step,parameter,truth_0..,noisy_0..`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let n = self.truth.first().map(|v| v.len()).unwrap_or(0);
        let mut header = vec!["step".to_string(), "parameter".to_string()];
        header.extend((0..n).map(|i| format!("truth_{i}")));
        header.extend((0..n).map(|i| format!("noisy_{i}")));
        out.write_record(&header).map_err(csv_err)?;
        for (k, (t, y)) in self.truth.iter().zip(&self.noisy).enumerate() {
            let mut row = vec![(k + 1).to_string(), self.parameter[k].to_string()];
            row.extend(t.iter().map(|v| v.to_string()));
            row.extend(y.iter().map(|v| v.to_string()));
            out.write_record(&row).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> crate::error::Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => io.into(),
        other => crate::error::Error::InvalidInput(format!("{other:?}")),
    }
}

fn add_noise(truth: &[DVector<f64>], sigma: f64, seed: u64) -> Vec<DVector<f64>> {
    if sigma == 0.0 {
        return truth.to_vec();
    }
    let mut rng = rng_from_seed(seed);
    truth.iter().map(|x| x + standard_normal_vec(&mut rng, x.len()) * sigma).collect()
}

pub fn gen_rotation(spec: &RotationSeriesSpec) -> SyntheticSeries {
    let mut truth = Vec::with_capacity(spec.steps);
    let mut x = DVector::from_row_slice(&spec.x1);
    let parameter: Vec<f64> = (1..=spec.steps).map(|k| spec.theta(k)).collect();
    for &theta in parameter.iter() {
        truth.push(x.clone());
        let (s, c) = theta.sin_cos();
        x = DVector::from_vec(vec![c * x[0] - s * x[1], s * x[0] + c * x[1]]);
    }
    let noisy = add_noise(&truth, spec.sigma, spec.seed);
    SyntheticSeries { truth, noisy, parameter }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PandemicSeriesSpec {
    pub steps: usize,
    pub dim: usize,
    pub gamma_start: f64,
    pub gamma_end: f64,
    pub seed_a: u64,
    pub seed_noise: u64,
    pub sigma: f64,
}

impl Default for PandemicSeriesSpec {
    fn default() -> Self {
        Self {
            steps: 1000,
            dim: 3,
            gamma_start: 1.01,
            gamma_end: 0.99,
            seed_a: 0,
            seed_noise: 1,
            sigma: 0.05,
        }
    }
}

impl PandemicSeriesSpec {
    /// Growth factor on the transition from step `k` to `k + 1` (1-based).
    pub fn gamma(&self, k: usize) -> f64 {
        if self.steps < 2 {
            return self.gamma_start;
        }
        self.gamma_start + (k as f64 - 1.0) * (self.gamma_end - self.gamma_start) / (self.steps as f64 - 1.0)
    }
}

/// Random `U[0,1)` matrix scaled by its Perron root.
pub fn normalized_operator(dim: usize, seed_a: u64) -> DMatrix<f64> {
    let mut rng = rng_from_seed(seed_a);
    let a = DMatrix::from_fn(dim, dim, |_, _| rng.random::<f64>());
    let eig = a.complex_eigenvalues();
    let perron = eig
        .iter()
        .max_by(|x, y| x.norm().total_cmp(&y.norm()))
        .expect("non-empty spectrum");
    debug_assert!(perron.re > 0.0 && perron.im.abs() <= 1e-10 * perron.norm(), "Perron root must be real positive");
    a / perron.norm()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PandemicSeries {
    pub series: SyntheticSeries,
    pub a_hat: DMatrix<f64>,
}

pub fn gen_pandemic(spec: &PandemicSeriesSpec) -> PandemicSeries {
    let a_hat = normalized_operator(spec.dim, spec.seed_a);
    let parameter: Vec<f64> = (1..=spec.steps).map(|k| spec.gamma(k)).collect();
    let mut truth = Vec::with_capacity(spec.steps);
    let mut x = DVector::from_element(spec.dim, 1.0);
    for &g in parameter.iter() {
        truth.push(x.clone());
        x = (&a_hat * &x) * g;
    }
    let noisy = add_noise(&truth, spec.sigma, spec.seed_noise);
    PandemicSeries {
        series: SyntheticSeries { truth, noisy, parameter },
        a_hat,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    #[test]
    fn rotation_angles_and_norm() {
        let spec = RotationSeriesSpec::default();
        assert_relative_eq!(spec.theta(1), PI / 64.0);
        assert_relative_eq!(spec.theta(500), PI / 8.0, epsilon = 1e-15);
        assert_relative_eq!(spec.theta(250), PI / 64.0 + 249.0 / 499.0 * 7.0 * PI / 64.0, epsilon = 1e-15);
        let s = gen_rotation(&spec);
        assert_eq!(s.truth.len(), 500);
        for x in &s.truth {
            assert_relative_eq!(x.norm(), 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn zero_noise_is_truth() {
        let s = gen_rotation(&RotationSeriesSpec {
            sigma: 0.0,
            ..Default::default()
        });
        assert_eq!(s.truth, s.noisy);
    }

    #[test]
    fn pandemic_gamma_and_radius() {
        let spec = PandemicSeriesSpec::default();
        assert_relative_eq!(spec.gamma(1), 1.01);
        assert_relative_eq!(spec.gamma(1000), 0.99, epsilon = 1e-15);
        let p = gen_pandemic(&spec);
        let radius = p.a_hat.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max);
        assert_relative_eq!(radius, 1.0, epsilon = 1e-10);
        assert_eq!(p.series.truth[0], DVector::from_element(3, 1.0));
    }

    #[test]
    fn csv_has_one_row_per_step() {
        let s = gen_rotation(&RotationSeriesSpec {
            steps: 3,
            ..Default::default()
        });
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("step,parameter,truth_0,truth_1,noisy_0,noisy_1"));
    }
}
