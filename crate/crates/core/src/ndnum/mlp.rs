//! Multilayer perceptron with hand-coded backpropagation.
//!
//! Layer weights are stored `(in_dim, out_dim)` so a batch `X` of shape
//! `(n, in_dim)` maps to `X·W + b`. Each layer applies its own activation;
//! the final layer must be [`Activation::Identity`].

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Rng, Tensor2};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x * sigmoid(x),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: Tensor2,
    pub b: Vec<f64>,
    pub act: Activation,
}

impl Layer {
    pub fn new(w: Tensor2, b: Vec<f64>, act: Activation) -> Result<Self> {
        if b.len() != w.cols() {
            return Err(Error::shape("bias length", w.cols(), b.len()));
        }
        Ok(Self { w, b, act })
    }

    pub fn in_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.cols()
    }
}

#[derive(Debug, Clone)]
pub struct MlpNet {
    layers: Vec<Layer>,
    // Bumped on every mutable access; caches from older versions are stale.
    version: u64,
}

impl PartialEq for MlpNet {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Activations recorded by [`MlpNet::forward`] for one backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    version: u64,
    inputs: Vec<Tensor2>,
    preacts: Vec<Tensor2>,
}

impl MlpCache {
    pub fn batch(&self) -> usize {
        self.inputs.first().map_or(0, Tensor2::rows)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub w: Tensor2,
    pub b: Vec<f64>,
}

/// Parameter gradients, shaped exactly like the network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrads>,
}

impl MlpGrads {
    pub fn zeros_like(net: &MlpNet) -> Self {
        Self {
            layers: net
                .layers()
                .iter()
                .map(|l| LayerGrads {
                    w: Tensor2::zeros(l.in_dim(), l.out_dim()),
                    b: vec![0.0; l.out_dim()],
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.w.data_mut().iter_mut().zip(b.w.data()) {
                *x += y;
            }
            for (x, y) in a.b.iter_mut().zip(&b.b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for l in &mut self.layers {
            l.w.data_mut().iter_mut().for_each(|x| *x *= k);
            l.b.iter_mut().for_each(|x| *x *= k);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.w.data());
            out.extend_from_slice(&l.b);
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.flatten().iter().all(|&x| x == 0.0)
    }
}

impl MlpNet {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::shape(
                    format!("layer {} input dim", k + 1),
                    pair[0].out_dim(),
                    pair[1].in_dim(),
                ));
            }
        }
        if layers.last().map(|l| l.act) != Some(Activation::Identity) {
            return Err(Error::Config("final layer activation must be identity".into()));
        }
        Ok(Self { layers, version: 0 })
    }

    /// Kaiming-uniform weights (bound `sqrt(6 / fan_in)`), zero biases.
    ///
    /// `dims` lists every width from input to output; hidden layers use
    /// `hidden_act`, the output layer is identity.
    pub fn kaiming(dims: &[usize], hidden_act: Activation, rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!("invalid layer widths {dims:?}")));
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|k| {
                let (fan_in, fan_out) = (dims[k], dims[k + 1]);
                let bound = (6.0 / fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.uniform(-bound, bound))
                    .collect();
                let act = if k + 1 == n {
                    Activation::Identity
                } else {
                    hidden_act
                };
                Layer::new(Tensor2::from_vec(fan_in, fan_out, data)?, vec![0.0; fan_out], act)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.version += 1;
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.data().len() + l.b.len()).sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.w.data());
            out.extend_from_slice(&l.b);
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape("flat parameter vector", self.param_count(), flat.len()));
        }
        let mut off = 0;
        for l in self.layers_mut() {
            let nw = l.w.data().len();
            l.w.data_mut().copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.b.len();
            l.b.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    /// SHA-256 over the little-endian bytes of every parameter.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for l in &self.layers {
            for x in l.w.data().iter().chain(&l.b) {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn check_input(&self, input: &Tensor2) -> Result<()> {
        if input.cols() != self.input_dim() {
            return Err(Error::shape("network input dim", self.input_dim(), input.cols()));
        }
        Ok(())
    }

    /// Forward pass recording what backward needs.
    pub fn forward(&self, input: &Tensor2) -> Result<(Tensor2, MlpCache)> {
        self.check_input(input)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut preacts = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for layer in &self.layers {
            let z = affine(layer, &x);
            let y = z.map(|v| layer.act.apply(v));
            inputs.push(x);
            preacts.push(z);
            x = y;
        }
        Ok((
            x,
            MlpCache {
                version: self.version,
                inputs,
                preacts,
            },
        ))
    }

    /// Forward pass without a cache.
    pub fn predict(&self, input: &Tensor2) -> Result<Tensor2> {
        self.check_input(input)?;
        let mut x = affine(&self.layers[0], input);
        activate(&mut x, self.layers[0].act);
        for layer in &self.layers[1..] {
            x = affine(layer, &x);
            activate(&mut x, layer.act);
        }
        Ok(x)
    }

    /// Backpropagates `grad_output` through the pass recorded in `cache`.
    pub fn backward(&self, cache: &MlpCache, grad_output: &Tensor2) -> Result<(MlpGrads, Tensor2)> {
        if cache.version != self.version || cache.inputs.len() != self.layers.len() {
            return Err(Error::Cache(
                "cache was recorded against different network parameters".into(),
            ));
        }
        if grad_output.rows() != cache.batch() {
            return Err(Error::shape("grad_output rows", cache.batch(), grad_output.rows()));
        }
        if grad_output.cols() != self.output_dim() {
            return Err(Error::shape("grad_output cols", self.output_dim(), grad_output.cols()));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut upstream = grad_output.clone();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let z = &cache.preacts[k];
            let dz = if layer.act == Activation::Identity {
                upstream
            } else {
                upstream.zip_map(z, |g, zv| g * layer.act.derivative(zv))?
            };
            let dw = cache.inputs[k].t_matmul(&dz)?;
            let mut db = vec![0.0; layer.out_dim()];
            for r in 0..dz.rows() {
                for (acc, g) in db.iter_mut().zip(dz.row(r)) {
                    *acc += g;
                }
            }
            upstream = dz.matmul_t(&layer.w)?;
            grads.push(LayerGrads { w: dw, b: db });
        }
        grads.reverse();
        Ok((MlpGrads { layers: grads }, upstream))
    }
}

fn affine(layer: &Layer, x: &Tensor2) -> Tensor2 {
    let mut z = x.matmul(&layer.w).expect("dims checked by caller");
    for r in 0..z.rows() {
        for (v, b) in z.row_mut(r).iter_mut().zip(&layer.b) {
            *v += b;
        }
    }
    z
}

fn activate(x: &mut Tensor2, act: Activation) {
    if act != Activation::Identity {
        x.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: Tensor2, act: Activation) -> MlpNet {
        let n = w.cols();
        MlpNet {
            layers: vec![Layer::new(w, vec![0.0; n], act).unwrap()],
            version: 0,
        }
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = MlpNet::from_layers(vec![
            Layer::new(Tensor2::identity(2), vec![0.0; 2], Activation::Identity).unwrap(),
        ])
        .unwrap();
        let x = Tensor2::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let (y, _) = net.forward(&x).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
    }

    #[test]
    fn relu_layer_zeroes_negatives() {
        let net = single(Tensor2::identity(2), Activation::Relu);
        let x = Tensor2::from_rows(&[vec![-1.0, 3.0]]).unwrap();
        assert_eq!(net.predict(&x).unwrap().data(), &[0.0, 3.0]);
    }

    #[test]
    fn two_layer_silu_hand_value() {
        let net = MlpNet::from_layers(vec![
            Layer::new(Tensor2::filled(1, 1, 0.5), vec![0.0], Activation::Silu).unwrap(),
            Layer::new(Tensor2::filled(1, 1, 0.5), vec![0.0], Activation::Identity).unwrap(),
        ])
        .unwrap();
        let (y, cache) = net.forward(&Tensor2::filled(1, 1, 1.0)).unwrap();
        let hidden = 0.5 / (1.0 + (-0.5f64).exp());
        assert!((hidden - 0.31123).abs() < 1e-5);
        assert!((y.data()[0] - 0.15561).abs() < 1e-5);
        assert!((cache.preacts[0].data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_identity_output_and_bad_chain() {
        let bad_act = vec![Layer::new(Tensor2::identity(2), vec![0.0; 2], Activation::Relu).unwrap()];
        assert!(MlpNet::from_layers(bad_act).is_err());
        let bad_chain = vec![
            Layer::new(Tensor2::zeros(2, 3), vec![0.0; 3], Activation::Silu).unwrap(),
            Layer::new(Tensor2::zeros(2, 1), vec![0.0; 1], Activation::Identity).unwrap(),
        ];
        assert!(matches!(MlpNet::from_layers(bad_chain), Err(Error::Shape { .. })));
    }

    #[test]
    fn forward_shape_error_names_dims() {
        let net = MlpNet::kaiming(&[3, 4, 2], Activation::Silu, &mut Rng::new(0)).unwrap();
        let err = net.forward(&Tensor2::zeros(1, 5)).unwrap_err();
        match err {
            Error::Shape { expected, got, .. } => assert_eq!((expected, got), (3, 5)),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn identity_backward_returns_grad_output() {
        let net = single(Tensor2::identity(3), Activation::Identity);
        let x = Tensor2::from_rows(&[vec![0.3, -1.0, 2.0]]).unwrap();
        let (_, cache) = net.forward(&x).unwrap();
        let g = Tensor2::from_rows(&[vec![1.0, -2.0, 0.5]]).unwrap();
        let (_, gi) = net.backward(&cache, &g).unwrap();
        assert_eq!(gi, g);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = Rng::new(5);
        let net = MlpNet::kaiming(&[4, 8, 8, 3], Activation::Silu, &mut rng).unwrap();
        let x = rng.gaussian(6, 4);
        let (_, cache) = net.forward(&x).unwrap();
        let (grads, gi) = net.backward(&cache, &Tensor2::zeros(6, 3)).unwrap();
        assert!(grads.is_zero());
        assert!(gi.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut rng = Rng::new(1);
        let mut net = MlpNet::kaiming(&[2, 4, 1], Activation::Silu, &mut rng).unwrap();
        let (_, cache) = net.forward(&rng.gaussian(3, 2)).unwrap();
        net.layers_mut()[0].b[0] += 1.0;
        assert!(matches!(
            net.backward(&cache, &Tensor2::zeros(3, 1)),
            Err(Error::Cache(_))
        ));
    }

    #[test]
    fn grad_output_shape_checked() {
        let mut rng = Rng::new(1);
        let net = MlpNet::kaiming(&[2, 4, 1], Activation::Silu, &mut rng).unwrap();
        let (_, cache) = net.forward(&rng.gaussian(3, 2)).unwrap();
        assert!(net.backward(&cache, &Tensor2::zeros(2, 1)).is_err());
        assert!(net.backward(&cache, &Tensor2::zeros(3, 2)).is_err());
    }

    #[test]
    fn predict_matches_forward() {
        let mut rng = Rng::new(9);
        let net = MlpNet::kaiming(&[5, 16, 16, 4], Activation::Silu, &mut rng).unwrap();
        let x = rng.gaussian(7, 5);
        assert_eq!(net.predict(&x).unwrap(), net.forward(&x).unwrap().0);
    }

    /// Loss `Σ out ⊙ r` for a fixed random `r`, so `∂L/∂out = r`.
    fn probe_loss(net: &MlpNet, x: &Tensor2, r: &Tensor2) -> f64 {
        let y = net.predict(x).unwrap();
        y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    }

    fn random_net(rng: &mut Rng) -> MlpNet {
        let depth = rng.int_inclusive(1, 3);
        let dims: Vec<usize> = (0..=depth).map(|_| rng.int_inclusive(1, 16)).collect();
        MlpNet::kaiming(&dims, Activation::Silu, rng).unwrap()
    }

    #[test]
    fn backward_matches_central_differences() {
        let h = 1e-6;
        for seed in 0..20 {
            let mut rng = Rng::new(seed);
            let mut net = random_net(&mut rng);
            let x = rng.gaussian(3, net.input_dim());
            let r = rng.gaussian(3, net.output_dim());
            let (_, cache) = net.forward(&x).unwrap();
            let (grads, gin) = net.backward(&cache, &r).unwrap();
            let analytic = grads.flatten();
            let base = net.params_flat();
            for (i, &a) in analytic.iter().enumerate() {
                let mut p = base.clone();
                p[i] = base[i] + h;
                net.set_params_flat(&p).unwrap();
                let up = probe_loss(&net, &x, &r);
                p[i] = base[i] - h;
                net.set_params_flat(&p).unwrap();
                let down = probe_loss(&net, &x, &r);
                let fd = (up - down) / (2.0 * h);
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-2);
                assert!(rel <= 1e-5, "seed {seed} param {i}: analytic {a} fd {fd}");
            }
            net.set_params_flat(&base).unwrap();
            for i in 0..x.data().len() {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp.data_mut()[i] += h;
                xm.data_mut()[i] -= h;
                let fd = (probe_loss(&net, &xp, &r) - probe_loss(&net, &xm, &r)) / (2.0 * h);
                let a = gin.data()[i];
                assert!((a - fd).abs() / a.abs().max(fd.abs()).max(1e-2) <= 1e-5);
            }
        }
    }

    #[test]
    fn backward_is_linear_in_upstream_gradient() {
        let mut rng = Rng::new(11);
        let net = MlpNet::kaiming(&[3, 12, 12, 2], Activation::Silu, &mut rng).unwrap();
        let x = rng.gaussian(5, 3);
        let (_, cache) = net.forward(&x).unwrap();
        let (g1, g2) = (rng.gaussian(5, 2), rng.gaussian(5, 2));
        let (a, b) = (0.7, -1.9);
        let combo = g1.scale(a).add(&g2.scale(b)).unwrap();
        let lhs = net.backward(&cache, &combo).unwrap().0.flatten();
        let f1 = net.backward(&cache, &g1).unwrap().0.flatten();
        let f2 = net.backward(&cache, &g2).unwrap().0.flatten();
        for i in 0..lhs.len() {
            assert!((lhs[i] - (a * f1[i] + b * f2[i])).abs() <= 1e-12);
        }
    }

    #[test]
    fn forward_and_backward_are_deterministic() {
        let build = || {
            let mut rng = Rng::new(4);
            let net = MlpNet::kaiming(&[2, 8, 1], Activation::Silu, &mut rng).unwrap();
            let x = rng.gaussian(4, 2);
            let (y, cache) = net.forward(&x).unwrap();
            let (g, _) = net.backward(&cache, &Tensor2::filled(4, 1, 1.0)).unwrap();
            (net.fingerprint(), y, g.flatten())
        };
        assert_eq!(build(), build());
    }
}
