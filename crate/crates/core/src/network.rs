//! Declarative sequential models and the copy-depth slicing used to build random-label heads.
//!
//! Depth is counted over *all* layers from the output end, parametric or not:
//! `d = 1` is the last layer alone, `d = layers.len()` is the whole network.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Owner, ParamId, ParamStore};
use crate::tensor::{conv_out_extent, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize },
    Dense { d_in: usize, d_out: usize },
    Relu,
    #[serde(rename = "maxpool2x2")]
    MaxPool2x2,
    Flatten,
    Dropout { p: f64 },
}

impl LayerSpec {
    pub fn is_parametric(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Dense { .. })
    }

    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Conv { c_in, c_out, k, .. } => c_out * c_in * k * k + c_out,
            LayerSpec::Dense { d_in, d_out } => d_out * d_in + d_out,
            _ => 0,
        }
    }
}

/// Per-sample input layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputShape {
    Image { channels: usize, height: usize, width: usize },
    Features(usize),
}

impl InputShape {
    pub fn dims(&self) -> Vec<usize> {
        match *self {
            InputShape::Image { channels, height, width } => vec![channels, height, width],
            InputShape::Features(d) => vec![d],
        }
    }

    pub fn size(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn is_image(&self) -> bool {
        matches!(self, InputShape::Image { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input: InputShape,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    pub fn new(input: InputShape, layers: Vec<LayerSpec>) -> Self {
        Self { input, layers }
    }

    /// `Flatten, Dense, ReLU, Dense, ReLU, Dense`, with a `Dropout` after each hidden ReLU when `dropout > 0`.
    pub fn toy_mlp(input: InputShape, hidden: [usize; 2], classes: usize, dropout: f64) -> Self {
        let mut layers = vec![LayerSpec::Flatten];
        let mut width = input.size();
        for h in hidden {
            layers.push(LayerSpec::Dense { d_in: width, d_out: h });
            layers.push(LayerSpec::Relu);
            if dropout > 0.0 {
                layers.push(LayerSpec::Dropout { p: dropout });
            }
            width = h;
        }
        layers.push(LayerSpec::Dense { d_in: width, d_out: classes });
        Self { input, layers }
    }

    /// `(Conv, ReLU, MaxPool) ×2, Flatten, Dense, ReLU, Dense`, with an optional `Dropout` after the hidden ReLU.
    pub fn toy_cnn(
        input: InputShape,
        channels: [usize; 2],
        hidden: usize,
        classes: usize,
        dropout: f64,
    ) -> Result<Self> {
        let InputShape::Image { channels: c0, height, width } = input else {
            return Err(Error::config("model.preset", "toy_cnn needs an image-shaped input"));
        };
        if height % 4 != 0 || width % 4 != 0 {
            return Err(Error::config("model.preset", format!("toy_cnn needs height and width divisible by 4, got {height}×{width}")));
        }
        let mut layers = Vec::new();
        let mut c = c0;
        for c_out in channels {
            layers.push(LayerSpec::Conv { c_in: c, c_out, k: 3, stride: 1, pad: 1 });
            layers.push(LayerSpec::Relu);
            layers.push(LayerSpec::MaxPool2x2);
            c = c_out;
        }
        layers.push(LayerSpec::Flatten);
        layers.push(LayerSpec::Dense { d_in: c * (height / 4) * (width / 4), d_out: hidden });
        layers.push(LayerSpec::Relu);
        if dropout > 0.0 {
            layers.push(LayerSpec::Dropout { p: dropout });
        }
        layers.push(LayerSpec::Dense { d_in: hidden, d_out: classes });
        Ok(Self { input, layers })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Checks that consecutive layers compose and returns the output shape.
    pub fn validate(&self) -> Result<InputShape> {
        propagate(self.input, &self.layers, "model.layers", 0)
    }

    pub fn output_dim(&self) -> Result<usize> {
        match self.validate()? {
            InputShape::Features(d) => Ok(d),
            InputShape::Image { .. } => Err(Error::config("model.layers", "network output is not flat")),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    /// Splits into a prefix and a suffix holding the last `d` layers.
    pub fn split_at_depth(&self, d: usize) -> Result<(ModelSpec, ModelSpec)> {
        let total = self.layers.len();
        if d == 0 || d > total {
            return Err(Error::config("copy_depth", format!("copy depth {d} outside 1..={total}")));
        }
        let cut = total - d;
        let prefix = ModelSpec { input: self.input, layers: self.layers[..cut].to_vec() };
        let suffix_input = prefix.validate()?;
        let suffix = ModelSpec { input: suffix_input, layers: self.layers[cut..].to_vec() };
        Ok((prefix, suffix))
    }

    /// Multiplies every hidden width in the last `d` layers by `factor` (rounded up).
    ///
    /// Input and final output dimensions are untouched; downstream input
    /// dimensions are re-derived from the widened shapes.
    pub fn widen_suffix(&self, d: usize, factor: f64) -> Result<ModelSpec> {
        if !factor.is_finite() || factor < 1.0 {
            return Err(Error::config("head_width_factor", format!("width factor {factor} must be ≥ 1")));
        }
        let (prefix, suffix) = self.split_at_depth(d)?;
        let parametric: Vec<usize> =
            suffix.layers.iter().enumerate().filter(|(_, l)| l.is_parametric()).map(|(i, _)| i).collect();
        if parametric.len() < 2 {
            return Err(Error::config("head_width_factor", format!("copied suffix at depth {d} has no hidden layer to widen")));
        }
        let mut layers = suffix.layers.clone();
        for &i in &parametric[..parametric.len() - 1] {
            match &mut layers[i] {
                LayerSpec::Conv { c_out, .. } => *c_out = (*c_out as f64 * factor).ceil() as usize,
                LayerSpec::Dense { d_out, .. } => *d_out = (*d_out as f64 * factor).ceil() as usize,
                _ => unreachable!(),
            }
        }
        // Re-thread input widths through the widened layers.
        let mut shape = suffix.input;
        for layer in layers.iter_mut() {
            match (&mut *layer, shape) {
                (LayerSpec::Conv { c_in, .. }, InputShape::Image { channels, .. }) => *c_in = channels,
                (LayerSpec::Dense { d_in, .. }, InputShape::Features(dim)) => *d_in = dim,
                _ => {}
            }
            shape = propagate(shape, std::slice::from_ref(layer), "model.layers", 0)?;
        }
        let mut all = prefix.layers;
        all.extend(layers);
        let widened = ModelSpec { input: self.input, layers: all };
        widened.validate()?;
        Ok(widened)
    }
}

fn propagate(mut shape: InputShape, layers: &[LayerSpec], path: &str, offset: usize) -> Result<InputShape> {
    for (i, layer) in layers.iter().enumerate() {
        let at = format!("{path}[{}]", i + offset);
        shape = match (layer.clone(), shape) {
            (LayerSpec::Conv { c_in, c_out, k, stride, pad }, InputShape::Image { channels, height, width }) => {
                if c_in != channels {
                    return Err(Error::config(at, format!("conv expects {c_in} channels, input has {channels}")));
                }
                if c_out == 0 {
                    return Err(Error::config(at, "conv needs at least one output channel"));
                }
                let h = conv_out_extent(height, k, stride, pad).map_err(|e| relocate(e, &at))?;
                let w = conv_out_extent(width, k, stride, pad).map_err(|e| relocate(e, &at))?;
                InputShape::Image { channels: c_out, height: h, width: w }
            }
            (LayerSpec::Conv { .. }, InputShape::Features(_)) => {
                return Err(Error::config(at, "conv applied to a flat input"));
            }
            (LayerSpec::Dense { d_in, d_out }, InputShape::Features(dim)) => {
                if d_in != dim {
                    return Err(Error::config(at, format!("dense expects {d_in} inputs, previous layer yields {dim}")));
                }
                if d_out == 0 {
                    return Err(Error::config(at, "dense needs at least one output"));
                }
                InputShape::Features(d_out)
            }
            (LayerSpec::Dense { .. }, InputShape::Image { .. }) => {
                return Err(Error::config(at, "dense applied to an image; insert a flatten layer"));
            }
            (LayerSpec::MaxPool2x2, InputShape::Image { channels, height, width }) => {
                if height % 2 != 0 || width % 2 != 0 {
                    return Err(Error::config(at, format!("maxpool2x2 needs even spatial size, got {height}×{width}")));
                }
                InputShape::Image { channels, height: height / 2, width: width / 2 }
            }
            (LayerSpec::MaxPool2x2, InputShape::Features(_)) => {
                return Err(Error::config(at, "maxpool2x2 applied to a flat input"));
            }
            (LayerSpec::Flatten, s) => InputShape::Features(s.size()),
            (LayerSpec::Dropout { p }, s) => {
                if !(0.0..1.0).contains(&p) {
                    return Err(Error::config(at, format!("dropout probability {p} outside [0, 1)")));
                }
                s
            }
            (LayerSpec::Relu, s) => s,
        };
    }
    Ok(shape)
}

fn relocate(e: Error, at: &str) -> Error {
    match e {
        Error::Config { message, .. } => Error::config(at, message),
        other => other,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
struct BuiltLayer {
    spec: LayerSpec,
    weight: Option<ParamId>,
    bias: Option<ParamId>,
}

/// A sequential network whose parameters live in a shared [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Sequential {
    spec: ModelSpec,
    layers: Vec<BuiltLayer>,
}

impl Sequential {
    /// Registers He-initialized parameters for `spec` in `store`.
    pub fn build<R: Rng + ?Sized>(
        spec: &ModelSpec,
        store: &mut ParamStore,
        owner: Owner,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, layer) in spec.layers.iter().enumerate() {
            let (weight_shape, fan_in, bias_len) = match *layer {
                LayerSpec::Conv { c_in, c_out, k, .. } => (vec![c_out, c_in, k, k], c_in * k * k, c_out),
                LayerSpec::Dense { d_in, d_out } => (vec![d_out, d_in], d_in, d_out),
                _ => {
                    layers.push(BuiltLayer { spec: layer.clone(), weight: None, bias: None });
                    continue;
                }
            };
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let w = Tensor::from_fn(&weight_shape, |_| normal.sample(rng));
            let weight = store.insert(format!("{prefix}.{i}.weight"), owner, w, true);
            let bias = store.insert(format!("{prefix}.{i}.bias"), owner, Tensor::zeros(&[bias_len]), false);
            layers.push(BuiltLayer { spec: layer.clone(), weight: Some(weight), bias: Some(bias) });
        }
        Ok(Self { spec: spec.clone(), layers })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| l.weight.into_iter().chain(l.bias)).collect()
    }

    /// Records the forward pass of `x` (`[batch, ...input]`) on `tape`.
    pub fn forward<R: Rng + ?Sized>(&self, tape: &mut Tape<'_>, x: Var, mode: Mode, rng: &mut R) -> Result<Var> {
        let expected = self.spec.input.dims();
        if tape.shape(x).get(1..) != Some(&expected[..]) {
            return Err(Error::dim("forward", format!("input {:?} does not match {:?} per sample", tape.shape(x), expected)));
        }
        let mut h = x;
        for layer in &self.layers {
            h = match layer.spec {
                LayerSpec::Conv { stride, pad, .. } => {
                    let k = tape.param(layer.weight.expect("conv has weight"));
                    let b = tape.param(layer.bias.expect("conv has bias"));
                    let y = tape.conv2d(h, k, stride, pad)?;
                    tape.add_bias(y, b)?
                }
                LayerSpec::Dense { .. } => {
                    let w = tape.param(layer.weight.expect("dense has weight"));
                    let b = tape.param(layer.bias.expect("dense has bias"));
                    let wt = tape.transpose(w)?;
                    let y = tape.matmul(h, wt)?;
                    tape.add_bias(y, b)?
                }
                LayerSpec::Relu => tape.relu(h),
                LayerSpec::MaxPool2x2 => tape.maxpool2x2(h)?,
                LayerSpec::Flatten => tape.flatten(h)?,
                LayerSpec::Dropout { p } => match mode {
                    Mode::Eval => h,
                    Mode::Train if p == 0.0 => h,
                    Mode::Train => {
                        let keep = 1.0 / (1.0 - p);
                        let mask = Tensor::from_fn(tape.shape(h), |_| if rng.random::<f64>() < p { 0.0 } else { keep });
                        tape.mul_const(h, mask)?
                    }
                },
            };
        }
        Ok(h)
    }
}

/// A standalone network that owns its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub store: ParamStore,
    pub net: Sequential,
}

impl Model {
    pub fn build<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = Sequential::build(spec, &mut store, Owner::FeatureExtractor, "net", rng)?;
        Ok(Self { store, net })
    }

    pub fn forward<R: Rng + ?Sized>(&self, x: &Tensor, mode: Mode, rng: &mut R) -> Result<Tensor> {
        let mut tape = Tape::new(&self.store);
        let xv = tape.input(x.clone());
        let y = self.net.forward(&mut tape, xv, mode, rng)?;
        Ok(tape.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mlp() -> ModelSpec {
        ModelSpec::toy_mlp(InputShape::Features(8), [16, 8], 3, 0.0)
    }

    #[test]
    fn dense_shapes() {
        let spec = ModelSpec::new(InputShape::Features(4), vec![LayerSpec::Dense { d_in: 4, d_out: 3 }]);
        let m = Model::build(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let ids = m.net.param_ids();
        assert_eq!(m.store.get(ids[0]).value.shape(), &[3, 4]);
        assert_eq!(m.store.get(ids[1]).value.shape(), &[3]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::build(&mlp(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = Model::build(&mlp(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn he_variance() {
        let spec = ModelSpec::new(InputShape::Features(1000), vec![LayerSpec::Dense { d_in: 1000, d_out: 1000 }]);
        let m = Model::build(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let w = &m.store.get(m.net.param_ids()[0]).value;
        let mean = w.sum() / w.len() as f64;
        let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
        assert!((var / (2.0 / 1000.0) - 1.0).abs() < 0.2, "variance {var}");
    }

    #[test]
    fn mismatched_layers_rejected() {
        let spec = ModelSpec::new(
            InputShape::Features(4),
            vec![LayerSpec::Dense { d_in: 4, d_out: 3 }, LayerSpec::Dense { d_in: 4, d_out: 2 }],
        );
        let err = spec.validate().unwrap_err();
        assert!(matches!(&err, Error::Config { path, .. } if path == "model.layers[1]"), "{err}");
    }

    #[test]
    fn dropout_probability_range() {
        let spec = ModelSpec::new(InputShape::Features(4), vec![LayerSpec::Dropout { p: 1.0 }]);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn split_depths() {
        let spec = mlp();
        let (prefix, suffix) = spec.split_at_depth(1).unwrap();
        assert_eq!(suffix.layers, vec![LayerSpec::Dense { d_in: 8, d_out: 3 }]);
        assert_eq!(suffix.input, InputShape::Features(8));
        assert_eq!(prefix.layers.len(), 5);

        let (prefix, suffix) = spec.split_at_depth(3).unwrap();
        assert_eq!(
            suffix.layers,
            vec![LayerSpec::Dense { d_in: 16, d_out: 8 }, LayerSpec::Relu, LayerSpec::Dense { d_in: 8, d_out: 3 }]
        );
        assert_eq!(prefix.layers.len() + suffix.layers.len(), spec.layers.len());

        let (prefix, suffix) = spec.split_at_depth(6).unwrap();
        assert!(prefix.layers.is_empty());
        assert_eq!(suffix, spec);

        assert!(spec.split_at_depth(0).is_err());
        assert!(spec.split_at_depth(7).is_err());
    }

    #[test]
    fn widen_doubles_hidden() {
        let spec = ModelSpec::new(
            InputShape::Features(64),
            vec![LayerSpec::Dense { d_in: 64, d_out: 32 }, LayerSpec::Relu, LayerSpec::Dense { d_in: 32, d_out: 5 }],
        );
        let wide = spec.widen_suffix(3, 2.0).unwrap();
        assert_eq!(
            wide.layers,
            vec![LayerSpec::Dense { d_in: 64, d_out: 64 }, LayerSpec::Relu, LayerSpec::Dense { d_in: 64, d_out: 5 }]
        );
        assert_eq!(spec.widen_suffix(3, 1.0).unwrap(), spec);
        assert!(wide.param_count() > spec.param_count());
        assert!(spec.widen_suffix(1, 2.0).is_err());
    }

    #[test]
    fn widen_conv_suffix_rethreads_flatten() {
        let spec = ModelSpec::toy_cnn(InputShape::Image { channels: 1, height: 8, width: 8 }, [2, 4], 6, 3, 0.0).unwrap();
        let wide = spec.widen_suffix(spec.depth(), 1.5).unwrap();
        assert_eq!(wide.output_dim().unwrap(), 3);
        assert_eq!(wide.layers[0], LayerSpec::Conv { c_in: 1, c_out: 3, k: 3, stride: 1, pad: 1 });
        assert_eq!(wide.layers[7], LayerSpec::Dense { d_in: 6 * 4, d_out: 9 });
    }

    #[test]
    fn dropout_modes() {
        let spec = ModelSpec::new(InputShape::Features(4), vec![LayerSpec::Dropout { p: 0.0 }]);
        let m = Model::build(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = Tensor::from_fn(&[2, 4], |i| i as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(m.forward(&x, Mode::Train, &mut rng).unwrap(), m.forward(&x, Mode::Eval, &mut rng).unwrap());

        let spec = ModelSpec::new(InputShape::Features(4), vec![LayerSpec::Dropout { p: 0.5 }]);
        let m = Model::build(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(m.forward(&x, Mode::Eval, &mut rng).unwrap(), x);
    }

    #[test]
    fn dropout_keep_rate() {
        let spec = ModelSpec::new(InputShape::Features(100_000), vec![LayerSpec::Dropout { p: 0.5 }]);
        let m = Model::build(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = Tensor::ones(&[1, 100_000]);
        let y = m.forward(&x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let kept = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / 1e5;
        assert!((kept - 0.5).abs() < 0.01, "keep rate {kept}");
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn forward_rejects_wrong_input() {
        let m = Model::build(&mlp(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = Tensor::zeros(&[2, 7]);
        assert!(matches!(m.forward(&x, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::Dimension { .. })));
    }
}
