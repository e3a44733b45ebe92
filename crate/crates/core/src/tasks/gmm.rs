//! Isotropic 2-D Gaussian mixtures with closed-form noised scores.
//!
//! VP noising maps a mixture component `N(μ, s²I)` to `N(alpha·μ, (alpha²s² + sigma²)I)`,
//! so the noised density and its score stay exact at every timestep.

use serde::{Deserialize, Serialize};

use crate::diffusion::{Demonstration, NoiseSchedule};
use crate::error::{Error, Result};
use crate::ndnum::{Rng, Tensor2};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmmComponent {
    pub mean: [f64; 2],
    pub std: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmSpec {
    pub components: Vec<GmmComponent>,
}

/// Raw-unit bound used to normalize the mixture task isotropically.
pub const GMM_NORMALIZATION_BOUND: f64 = 3.0;

impl GmmSpec {
    pub fn new(components: Vec<GmmComponent>) -> Result<Self> {
        let spec = Self { components };
        spec.validate()?;
        Ok(spec)
    }

    /// Two equal-weight modes at `(±2, 0)` with std 0.3, in raw units.
    pub fn two_mode() -> Self {
        Self {
            components: vec![
                GmmComponent {
                    mean: [-2.0, 0.0],
                    std: 0.3,
                    weight: 0.5,
                },
                GmmComponent {
                    mean: [2.0, 0.0],
                    std: 0.3,
                    weight: 0.5,
                },
            ],
        }
    }

    /// [`two_mode`](Self::two_mode) in normalized action units.
    pub fn two_mode_normalized() -> Self {
        Self::two_mode().scaled(1.0 / GMM_NORMALIZATION_BOUND)
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::Config("mixture needs at least one component".into()));
        }
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        if self.components.iter().any(|c| c.weight < 0.0) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "mixture weights must be non-negative and sum to 1, got {total}"
            )));
        }
        if self.components.iter().any(|c| !(c.std > 0.0)) {
            return Err(Error::Config("mixture stds must be positive".into()));
        }
        Ok(())
    }

    /// Every mean and std multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            components: self
                .components
                .iter()
                .map(|c| GmmComponent {
                    mean: [c.mean[0] * k, c.mean[1] * k],
                    std: c.std * k,
                    weight: c.weight,
                })
                .collect(),
        }
    }

    /// The mixture after VP noising to timestep `t`.
    pub fn noised(&self, s: &NoiseSchedule, t: usize) -> Result<Self> {
        s.check_t(t)?;
        let (al, sg) = (s.alpha(t), s.sigma(t));
        Ok(Self {
            components: self
                .components
                .iter()
                .map(|c| GmmComponent {
                    mean: [al * c.mean[0], al * c.mean[1]],
                    std: (al * al * c.std * c.std + sg * sg).sqrt(),
                    weight: c.weight,
                })
                .collect(),
        })
    }

    fn log_terms(&self, x: [f64; 2]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| {
                let v = c.std * c.std;
                let d2 = (x[0] - c.mean[0]).powi(2) + (x[1] - c.mean[1]).powi(2);
                c.weight.ln() - d2 / (2.0 * v) - (2.0 * std::f64::consts::PI * v).ln()
            })
            .collect()
    }

    pub fn log_density(&self, x: [f64; 2]) -> f64 {
        log_sum_exp(&self.log_terms(x))
    }

    /// `∇_x log p(x)`, via responsibilities computed with log-sum-exp.
    pub fn score(&self, x: [f64; 2]) -> [f64; 2] {
        let terms = self.log_terms(x);
        let lse = log_sum_exp(&terms);
        let mut out = [0.0; 2];
        for (c, lt) in self.components.iter().zip(&terms) {
            let r = (lt - lse).exp();
            let v = c.std * c.std;
            out[0] += r * (c.mean[0] - x[0]) / v;
            out[1] += r * (c.mean[1] - x[1]) / v;
        }
        out
    }

    /// `n` i.i.d. draws as an `n × 2` tensor.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Tensor2 {
        self.sample_labeled(n, rng).0
    }

    /// Draws plus the component index of each draw.
    pub fn sample_labeled(&self, n: usize, rng: &mut Rng) -> (Tensor2, Vec<usize>) {
        let mut out = Tensor2::zeros(n, 2);
        let mut labels = Vec::with_capacity(n);
        for r in 0..n {
            let u = rng.uniform(0.0, 1.0);
            let mut acc = 0.0;
            let mut k = self.components.len() - 1;
            for (i, c) in self.components.iter().enumerate() {
                acc += c.weight;
                if u < acc {
                    k = i;
                    break;
                }
            }
            let c = &self.components[k];
            let (z0, z1) = (rng.normal(), rng.normal());
            out.set(r, 0, c.mean[0] + c.std * z0);
            out.set(r, 1, c.mean[1] + c.std * z1);
            labels.push(k);
        }
        (out, labels)
    }

    /// Draws wrapped as observation-free single-step demonstrations.
    pub fn demonstrations(&self, n: usize, rng: &mut Rng) -> Vec<Demonstration> {
        let draws = self.sample(n, rng);
        (0..n)
            .map(|r| Demonstration {
                obs: Vec::new(),
                actions: Tensor2::from_vec(1, 2, draws.row(r).to_vec()).expect("1×2"),
            })
            .collect()
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Exact score of the VP-noised mixture at each row of `x` (`n × 2`).
pub fn gmm_noised_score(spec: &GmmSpec, s: &NoiseSchedule, x: &Tensor2, t: usize) -> Result<Tensor2> {
    if x.cols() != 2 {
        return Err(Error::shape("mixture point dim", 2, x.cols()));
    }
    let noised = spec.noised(s, t)?;
    let mut out = Tensor2::zeros(x.rows(), 2);
    for r in 0..x.rows() {
        let sc = noised.score([x.get(r, 0), x.get(r, 1)]);
        out.row_mut(r).copy_from_slice(&sc);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndnum::Rng;
    use proptest::prelude::{prop_assert, proptest};

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::linear(50, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn degenerate_single_component_collapses_to_mean() {
        let spec = GmmSpec::new(vec![GmmComponent {
            mean: [0.4, -0.7],
            std: 1e-9,
            weight: 1.0,
        }])
        .unwrap();
        let x = spec.sample(100, &mut Rng::new(1));
        for r in 0..100 {
            assert!((x.get(r, 0) - 0.4).abs() < 1e-7 && (x.get(r, 1) + 0.7).abs() < 1e-7);
        }
    }

    #[test]
    fn equal_modes_split_within_binomial_band() {
        let n = 20_000;
        let (_, labels) = GmmSpec::two_mode().sample_labeled(n, &mut Rng::new(5));
        let frac = labels.iter().filter(|&&k| k == 0).count() as f64 / n as f64;
        assert!((frac - 0.5).abs() <= 3.0 * (0.25 / n as f64).sqrt(), "{frac}");
    }

    #[test]
    fn sampling_is_seeded() {
        let spec = GmmSpec::two_mode();
        assert_eq!(spec.sample(50, &mut Rng::new(3)), spec.sample(50, &mut Rng::new(3)));
    }

    #[test]
    fn midpoint_score_vanishes() {
        let x = Tensor2::from_rows(&[vec![0.0, 0.0]]).unwrap();
        for t in [1, 10, 50] {
            let sc = gmm_noised_score(&GmmSpec::two_mode_normalized(), &schedule(), &x, t).unwrap();
            assert!(sc.data().iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn standard_normal_stays_standard_normal() {
        let spec = GmmSpec::new(vec![GmmComponent {
            mean: [0.0, 0.0],
            std: 1.0,
            weight: 1.0,
        }])
        .unwrap();
        let x = Tensor2::from_rows(&[vec![0.7, -1.3], vec![-2.0, 0.1]]).unwrap();
        for t in [1, 25, 50] {
            let sc = gmm_noised_score(&spec, &schedule(), &x, t).unwrap();
            for (a, b) in sc.data().iter().zip(x.data()) {
                assert!((a + b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let c = |w: f64, s: f64| GmmComponent {
            mean: [0.0, 0.0],
            std: s,
            weight: w,
        };
        assert!(GmmSpec::new(vec![c(0.5, 1.0)]).is_err());
        assert!(GmmSpec::new(vec![c(1.0, 0.0)]).is_err());
        assert!(GmmSpec::new(vec![c(1.5, 1.0), c(-0.5, 1.0)]).is_err());
        assert!(GmmSpec::new(vec![]).is_err());
    }

    #[test]
    fn normalized_samples_mostly_in_unit_box() {
        // Modes sit 3.3 stds inside the box edge.
        let x = GmmSpec::two_mode_normalized().sample(10_000, &mut Rng::new(0));
        let outside = x.data().iter().filter(|v| v.abs() > 1.0).count();
        assert!(outside < 30, "{outside}");
    }

    proptest! {
        #[test]
        fn score_matches_finite_difference(
            m0 in -2.0..2.0f64, m1 in -2.0..2.0f64, m2 in -2.0..2.0f64, m3 in -2.0..2.0f64,
            s0 in 0.1..1.0f64, s1 in 0.1..1.0f64, w in 0.05..0.95f64,
            x0 in -2.0..2.0f64, x1 in -2.0..2.0f64, t in 1usize..=50,
        ) {
            let spec = GmmSpec::new(vec![
                GmmComponent { mean: [m0, m1], std: s0, weight: w },
                GmmComponent { mean: [m2, m3], std: s1, weight: 1.0 - w },
            ]).unwrap();
            let noised = spec.noised(&schedule(), t).unwrap();
            let h = 1e-5;
            let fd = [
                (noised.log_density([x0 + h, x1]) - noised.log_density([x0 - h, x1])) / (2.0 * h),
                (noised.log_density([x0, x1 + h]) - noised.log_density([x0, x1 - h])) / (2.0 * h),
            ];
            let x = Tensor2::from_rows(&[vec![x0, x1]]).unwrap();
            let sc = gmm_noised_score(&spec, &schedule(), &x, t).unwrap();
            for k in 0..2 {
                prop_assert!((sc.data()[k] - fd[k]).abs() < 1e-6 * (1.0 + fd[k].abs()));
            }
        }

        #[test]
        fn noising_composes_with_component_variances(t in 1usize..=50) {
            // The noised spec, evaluated as a plain mixture, equals the
            // component-wise closed form.
            let s = schedule();
            let spec = GmmSpec::two_mode_normalized();
            let noised = spec.noised(&s, t).unwrap();
            for (c, n) in spec.components.iter().zip(&noised.components) {
                let v = s.alpha(t).powi(2) * c.std.powi(2) + s.sigma(t).powi(2);
                prop_assert!((n.std.powi(2) - v).abs() < 1e-12);
                prop_assert!((n.mean[0] - s.alpha(t) * c.mean[0]).abs() < 1e-12);
            }
        }
    }
}
