use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputTransform {
    Identity,
    Softplus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    /// Uniform on `±sqrt(6 / (fan_in + fan_out))`.
    GlorotUniform,
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    HeNormal,
}

/// One affine map `x -> W x + b`, `W` stored as `out x in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Layer {
    fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Array2::zeros((output, input)),
            b: Array1::zeros(output),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
        }
    }
}

#[inline]
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Dense feed-forward network with a shared hidden activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
    activation: Activation,
    output: OutputTransform,
}

/// Gradients shaped like the network's layers.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<Layer>,
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net.layers.iter().map(Layer::zeros_like).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w += &b.w;
            a.b += &b.b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for layer in &mut self.layers {
            layer.w *= factor;
            layer.b *= factor;
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }
}

/// Mean batch loss and its parameter gradient.
#[derive(Clone, Debug)]
pub struct GradBundle {
    pub loss: f64,
    pub grads: MlpGrads,
}

/// Intermediate values of a batched forward pass.
pub struct ForwardCache {
    /// Input to each layer (`inputs[0]` is the network input).
    inputs: Vec<Array2<f64>>,
    /// Pre-transform output of the last layer.
    logits: Array2<f64>,
    pub output: Array2<f64>,
}

fn flatten(layers: &[Layer]) -> Vec<f64> {
    let mut out = Vec::new();
    for layer in layers {
        out.extend(layer.w.iter().copied());
        out.extend(layer.b.iter().copied());
    }
    out
}

impl Mlp {
    /// Network with all weights and biases zero.
    pub fn zeros(dims: &[usize], activation: Activation, output: OutputTransform) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::param("dims", "need at least input and output widths"));
        }
        if let Some(pos) = dims.iter().position(|&d| d == 0) {
            return Err(Error::param("dims", format!("layer {pos} has zero width")));
        }
        let layers = dims.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect();
        Ok(Self {
            layers,
            activation,
            output,
        })
    }

    /// Weights drawn per `scheme`, biases zero.
    pub fn init(
        dims: &[usize],
        activation: Activation,
        output: OutputTransform,
        scheme: InitScheme,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let mut net = Self::zeros(dims, activation, output)?;
        for layer in &mut net.layers {
            let (fan_out, fan_in) = layer.w.dim();
            match scheme {
                InitScheme::GlorotUniform => {
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    layer.w.mapv_inplace(|_| bound * (2.0 * rng.uniform_open() - 1.0));
                }
                InitScheme::HeNormal => {
                    let std = (2.0 / fan_in as f64).sqrt();
                    layer.w.mapv_inplace(|_| std * rng.standard_normal());
                }
            }
        }
        Ok(net)
    }

    pub(crate) fn from_layers(layers: Vec<Layer>, activation: Activation, output: OutputTransform) -> Self {
        Self {
            layers,
            activation,
            output,
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn output_transform(&self) -> OutputTransform {
        self.output
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(|l| l.b.len()));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.b.len())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape {
                expected: self.param_count(),
                got: flat.len(),
            });
        }
        let mut it = flat.iter().copied();
        for layer in &mut self.layers {
            layer.w.iter_mut().for_each(|w| *w = it.next().unwrap_or_default());
            layer.b.iter_mut().for_each(|b| *b = it.next().unwrap_or_default());
        }
        Ok(())
    }

    fn activate(&self, z: &mut Array2<f64>) {
        match self.activation {
            Activation::Tanh => z.mapv_inplace(f64::tanh),
            Activation::Relu => z.mapv_inplace(|x| x.max(0.0)),
        }
    }

    fn transform(&self, z: &Array2<f64>) -> Array2<f64> {
        match self.output {
            OutputTransform::Identity => z.clone(),
            OutputTransform::Softplus => z.mapv(softplus),
        }
    }

    fn check_input(&self, x: &ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        Ok(())
    }

    /// Single-sample evaluation.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, x.len()), x).map_err(|_| Error::Shape {
            expected: self.input_dim(),
            got: x.len(),
        })?;
        Ok(self.forward_batch(view)?.into_raw_vec_and_offset().0)
    }

    /// Row-wise evaluation of a batch (`samples x input_dim`).
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let mut h = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.w.t());
            z += &layer.b;
            if i < last {
                self.activate(&mut z);
            }
            h = z;
        }
        Ok(match self.output {
            OutputTransform::Identity => h,
            OutputTransform::Softplus => h.mapv(softplus),
        })
    }

    pub fn forward_cached(&self, x: ArrayView2<'_, f64>) -> Result<ForwardCache> {
        self.check_input(&x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.w.t());
            z += &layer.b;
            inputs.push(h);
            if i < last {
                self.activate(&mut z);
            }
            h = z;
        }
        let output = self.transform(&h);
        Ok(ForwardCache {
            inputs,
            logits: h,
            output,
        })
    }

    /// Reverse pass. `dy` is the loss adjoint of the transformed output.
    /// Returns parameter gradients summed over rows and the input adjoint.
    pub fn backward(&self, cache: &ForwardCache, dy: ArrayView2<'_, f64>) -> (MlpGrads, Array2<f64>) {
        let mut delta = match self.output {
            OutputTransform::Identity => dy.to_owned(),
            OutputTransform::Softplus => {
                let mut d = dy.to_owned();
                Zip::from(&mut d).and(&cache.logits).for_each(|d, &z| *d *= sigmoid(z));
                d
            }
        };
        let mut grads: Vec<Layer> = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let input = &cache.inputs[i];
            let gw = delta.t().dot(input);
            let gb = delta.sum_axis(Axis(0));
            grads.push(Layer { w: gw, b: gb });
            let mut upstream = delta.dot(&layer.w);
            if i > 0 {
                // `input` is the activated output of layer i-1.
                match self.activation {
                    Activation::Tanh => {
                        Zip::from(&mut upstream).and(input).for_each(|g, &a| *g *= 1.0 - a * a)
                    }
                    Activation::Relu => Zip::from(&mut upstream).and(input).for_each(|g, &a| {
                        if a <= 0.0 {
                            *g = 0.0
                        }
                    }),
                }
            }
            delta = upstream;
        }
        grads.reverse();
        (MlpGrads { layers: grads }, delta)
    }

    /// Mean of a per-sample loss over the rows of `x` and its gradient.
    ///
    /// `loss(i, y)` returns the loss of sample `i` with network output `y`
    /// together with `dloss/dy`.
    pub fn loss_and_grad<F>(&self, x: ArrayView2<'_, f64>, mut loss: F) -> Result<GradBundle>
    where
        F: FnMut(usize, &[f64]) -> (f64, Vec<f64>),
    {
        let rows = x.nrows();
        if rows == 0 {
            return Err(Error::param("batch", "empty batch"));
        }
        let cache = self.forward_cached(x)?;
        let out_dim = self.output_dim();
        let mut dy = Array2::zeros((rows, out_dim));
        let mut total = 0.0;
        for i in 0..rows {
            let y = cache.output.row(i).to_vec();
            let (value, grad) = loss(i, &y);
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    index: i,
                    detail: format!("loss {value} at output {y:?}"),
                });
            }
            if grad.len() != out_dim {
                return Err(Error::Shape {
                    expected: out_dim,
                    got: grad.len(),
                });
            }
            total += value;
            for (k, g) in grad.into_iter().enumerate() {
                dy[[i, k]] = g / rows as f64;
            }
        }
        let (grads, _) = self.backward(&cache, dy.view());
        Ok(GradBundle {
            loss: total / rows as f64,
            grads,
        })
    }
}

/// `m d0 + m + L (m^2 + m) + d1 m + d1`, with `L` the number of width-`m`
/// to width-`m` maps.
pub fn param_count_formula(d0: usize, m: usize, hidden_to_hidden: usize, d1: usize) -> usize {
    m * d0 + m + hidden_to_hidden * (m * m + m) + d1 * m + d1
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(&[3, 5, 5, 2], Activation::Tanh, OutputTransform::Identity).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 0.5]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_single_layer() {
        let mut net = Mlp::zeros(&[3, 3], Activation::Relu, OutputTransform::Identity).unwrap();
        net.layers_mut()[0].w = Array2::eye(3);
        assert_eq!(net.forward(&[1.0, -2.0, 0.5]).unwrap(), vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn softplus_output_is_positive() {
        let mut rng = RngStream::new(2, 0);
        let net = Mlp::init(&[4, 8, 8, 2], Activation::Relu, OutputTransform::Softplus, InitScheme::HeNormal, &mut rng)
            .unwrap();
        for k in 0..200 {
            let x = [k as f64 / 20.0 - 5.0, 0.3, -2.0, 7.0];
            assert!(net.forward(&x).unwrap().iter().all(|&y| y > 0.0));
        }
        assert!(softplus(-800.0) >= 0.0);
        assert!(softplus(3.0) > 0.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let net = Mlp::zeros(&[3, 2], Activation::Tanh, OutputTransform::Identity).unwrap();
        assert!(net.forward(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn parameter_count_identity() {
        let net = Mlp::zeros(&[4, 100, 100, 1], Activation::Tanh, OutputTransform::Identity).unwrap();
        assert_eq!(net.param_count(), param_count_formula(4, 100, 1, 1));
        let net = Mlp::zeros(&[4, 256, 256, 256, 2], Activation::Relu, OutputTransform::Softplus).unwrap();
        assert_eq!(net.param_count(), param_count_formula(4, 256, 2, 2));
    }

    #[test]
    fn scalar_squared_loss_gradient() {
        let mut net = Mlp::zeros(&[1, 1], Activation::Tanh, OutputTransform::Identity).unwrap();
        net.layers_mut()[0].w = array![[0.7]];
        net.layers_mut()[0].b = array![-0.2];
        let (x, target) = (1.5, 0.4);
        let x_arr = array![[x]];
        let g = net
            .loss_and_grad(x_arr.view(), |_, y| ((y[0] - target).powi(2), vec![2.0 * (y[0] - target)]))
            .unwrap();
        let resid = 0.7 * x - 0.2 - target;
        assert!((g.grads.layers[0].w[[0, 0]] - 2.0 * resid * x).abs() < 1e-15);
        assert!((g.grads.layers[0].b[0] - 2.0 * resid).abs() < 1e-15);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut rng = RngStream::new(3, 0);
        let net =
            Mlp::init(&[2, 4, 1], Activation::Tanh, OutputTransform::Identity, InitScheme::GlorotUniform, &mut rng).unwrap();
        let x = array![[0.3, 0.1], [1.0, -1.0]];
        let g = net.loss_and_grad(x.view(), |_, _| (3.0, vec![0.0])).unwrap();
        assert_eq!(g.loss, 3.0);
        assert!(g.grads.flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_loss_reports_index() {
        let net = Mlp::zeros(&[1, 1], Activation::Tanh, OutputTransform::Identity).unwrap();
        let x = array![[0.0], [1.0], [2.0]];
        let err = net
            .loss_and_grad(x.view(), |i, _| (if i == 2 { f64::NAN } else { 0.0 }, vec![0.0]))
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 2, .. }));
    }

    #[test]
    fn he_normal_weight_scale() {
        let mut rng = RngStream::new(21, 0);
        let net =
            Mlp::init(&[256, 256, 1], Activation::Relu, OutputTransform::Identity, InitScheme::HeNormal, &mut rng).unwrap();
        let w = &net.layers()[0].w;
        let n = w.len() as f64;
        let mean = w.sum() / n;
        let std = (w.mapv(|x| (x - mean).powi(2)).sum() / n).sqrt();
        let target = (2.0f64 / 256.0).sqrt();
        assert!((std / target - 1.0).abs() < 0.05, "std {std} vs {target}");
        assert!(net.layers().iter().all(|l| l.b.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = Mlp::init(&[4, 6, 1], Activation::Tanh, OutputTransform::Identity, InitScheme::GlorotUniform, &mut RngStream::new(5, 5))
            .unwrap();
        let b = Mlp::init(&[4, 6, 1], Activation::Tanh, OutputTransform::Identity, InitScheme::GlorotUniform, &mut RngStream::new(5, 5))
            .unwrap();
        assert_eq!(a, b);
    }
}
