//! Demonstrations and action normalization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndnum::Tensor2;

/// One `(observation, action chunk)` pair. `actions` is `H × A`.
#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub obs: Vec<f64>,
    pub actions: Tensor2,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DemoRecord {
    obs: Vec<f64>,
    actions: Vec<Vec<f64>>,
}

impl Serialize for Demonstration {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        DemoRecord {
            obs: self.obs.clone(),
            actions: self.actions.to_rows(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Demonstration {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rec = DemoRecord::deserialize(d)?;
        if rec.actions.is_empty() {
            return Err(serde::de::Error::custom("actions must contain at least one step"));
        }
        let actions = Tensor2::from_rows(&rec.actions).map_err(serde::de::Error::custom)?;
        Ok(Self {
            obs: rec.obs,
            actions,
        })
    }
}

impl Demonstration {
    pub fn horizon(&self) -> usize {
        self.actions.rows()
    }

    pub fn action_dim(&self) -> usize {
        self.actions.cols()
    }
}

/// Checks that a dataset is nonempty and consistently shaped; returns
/// `(obs_dim, horizon, action_dim)`.
pub fn dataset_dims(data: &[Demonstration]) -> Result<(usize, usize, usize)> {
    let first = data
        .first()
        .ok_or_else(|| Error::Config("dataset is empty".into()))?;
    let dims = (first.obs.len(), first.horizon(), first.action_dim());
    for (i, d) in data.iter().enumerate() {
        let got = (d.obs.len(), d.horizon(), d.action_dim());
        if got != dims {
            return Err(Error::Config(format!(
                "demonstration {i} has dims {got:?}, expected {dims:?}"
            )));
        }
    }
    Ok(dims)
}

/// Per-action-dimension affine map of `[lo, hi]` onto `[−1, 1]`, shared
/// across the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalizer {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Normalizer {
    pub fn identity(action_dim: usize) -> Self {
        Self {
            lo: vec![-1.0; action_dim],
            hi: vec![1.0; action_dim],
        }
    }

    /// Same symmetric bounds `[-bound, bound]` on every dimension.
    pub fn symmetric(action_dim: usize, bound: f64) -> Self {
        Self {
            lo: vec![-bound; action_dim],
            hi: vec![bound; action_dim],
        }
    }

    /// Per-dimension min/max over every action in the dataset.
    pub fn fit(data: &[Demonstration]) -> Result<Self> {
        let (_, _, a) = dataset_dims(data)?;
        let mut lo = vec![f64::INFINITY; a];
        let mut hi = vec![f64::NEG_INFINITY; a];
        for d in data {
            for r in 0..d.horizon() {
                for (j, &x) in d.actions.row(r).iter().enumerate() {
                    lo[j] = lo[j].min(x);
                    hi[j] = hi[j].max(x);
                }
            }
        }
        Ok(Self { lo, hi })
    }

    pub fn action_dim(&self) -> usize {
        self.lo.len()
    }

    fn span(&self, j: usize) -> f64 {
        let s = self.hi[j] - self.lo[j];
        if s > 0.0 {
            s
        } else {
            // Constant dimension: map the value to 0 with unit scale.
            2.0
        }
    }

    fn centre(&self, j: usize) -> f64 {
        0.5 * (self.lo[j] + self.hi[j])
    }

    pub fn normalize(&self, j: usize, x: f64) -> f64 {
        2.0 * (x - self.centre(j)) / self.span(j)
    }

    pub fn denormalize(&self, j: usize, y: f64) -> f64 {
        self.centre(j) + 0.5 * y * self.span(j)
    }

    /// Normalizes a flattened chunk whose entries cycle through the action dims.
    pub fn normalize_flat(&self, flat: &mut [f64]) {
        let a = self.action_dim();
        for (i, x) in flat.iter_mut().enumerate() {
            *x = self.normalize(i % a, *x);
        }
    }

    pub fn denormalize_flat(&self, flat: &mut [f64]) {
        let a = self.action_dim();
        for (i, x) in flat.iter_mut().enumerate() {
            *x = self.denormalize(i % a, *x);
        }
    }
}

/// Dataset flattened into training matrices: normalized actions `N × (H·A)`
/// and observations `N × obs_dim`.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub actions: Tensor2,
    pub obs: Tensor2,
}

impl TrainingSet {
    pub fn build(data: &[Demonstration], norm: &Normalizer) -> Result<Self> {
        let (obs_dim, h, a) = dataset_dims(data)?;
        if norm.action_dim() != a {
            return Err(Error::shape("normalizer action dim", a, norm.action_dim()));
        }
        let mut actions = Tensor2::zeros(data.len(), h * a);
        let mut obs = Tensor2::zeros(data.len(), obs_dim);
        for (i, d) in data.iter().enumerate() {
            let row = actions.row_mut(i);
            row.copy_from_slice(d.actions.data());
            norm.normalize_flat(row);
            obs.row_mut(i).copy_from_slice(&d.obs);
        }
        Ok(Self { actions, obs })
    }

    pub fn len(&self) -> usize {
        self.actions.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo(obs: Vec<f64>, rows: &[Vec<f64>]) -> Demonstration {
        Demonstration {
            obs,
            actions: Tensor2::from_rows(rows).unwrap(),
        }
    }

    #[test]
    fn fit_maps_extremes_to_unit_interval() {
        let data = vec![
            demo(vec![0.0], &[vec![-2.0, 5.0], vec![0.0, 7.0]]),
            demo(vec![1.0], &[vec![4.0, 6.0], vec![1.0, 5.0]]),
        ];
        let n = Normalizer::fit(&data).unwrap();
        let set = TrainingSet::build(&data, &n).unwrap();
        assert!(set.actions.data().iter().all(|x| (-1.0..=1.0).contains(x)));
        assert_eq!(n.normalize(0, -2.0), -1.0);
        assert_eq!(n.normalize(0, 4.0), 1.0);
        assert_eq!(n.normalize(1, 7.0), 1.0);
        assert!((n.denormalize(1, n.normalize(1, 5.5)) - 5.5).abs() < 1e-15);
    }

    #[test]
    fn constant_dimension_maps_to_zero() {
        let data = vec![demo(vec![], &[vec![3.0]]), demo(vec![], &[vec![3.0]])];
        let n = Normalizer::fit(&data).unwrap();
        assert_eq!(n.normalize(0, 3.0), 0.0);
    }

    #[test]
    fn mismatched_dims_rejected() {
        let data = vec![demo(vec![0.0], &[vec![1.0]]), demo(vec![], &[vec![1.0]])];
        assert!(dataset_dims(&data).is_err());
        assert!(dataset_dims(&[]).is_err());
    }

    #[test]
    fn json_shape() {
        let d = demo(vec![0.5, -0.25], &[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let text = serde_json::to_string(&d).unwrap();
        assert_eq!(text, r#"{"obs":[0.5,-0.25],"actions":[[1.0,2.0],[3.0,4.0]]}"#);
        let back: Demonstration = serde_json::from_str(&text).unwrap();
        assert_eq!(back, d);
    }
}
