//! Fully connected encoders: ReLU hidden layers and a tanh output layer
//! whose width is the code length.
//!
//! The same type backs all three encoders (label, image, text). Relaxed
//! codes are binarized with [`sign_code`], which maps `0` to `+1`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{put_u16, put_u32, to_u32, ByteReader};
use crate::error::{Error, Result};
use crate::numkit::{matmul, Matrix};
use crate::scalar::Scalar;

const MODEL_MAGIC: &[u8; 5] = b"DSIBM";
const MODEL_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        }
    }

    fn from_tag(tag: u8, offset: u64) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Tanh),
            t => Err(Error::format(offset, format!("unknown activation tag {t}"))),
        }
    }

    #[inline]
    fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Relu => z.max(T::zero()),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn derivative_from_output<T: Scalar>(self, a: T) -> T {
        match self {
            Activation::Relu => {
                if a > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - a * a,
        }
    }
}

/// Shape and initialization of one encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub code_bits: usize,
    pub init_seed: u64,
    pub init_scale: f64,
}

impl NetSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, code_bits: usize, init_seed: u64) -> Self {
        Self {
            input_dim,
            hidden_dims,
            code_bits,
            init_seed,
            init_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.code_bits == 0 {
            return Err(Error::invalid("code_bits must be at least 1"));
        }
        if self.hidden_dims.is_empty() {
            return Err(Error::invalid("hidden_dims must be non-empty"));
        }
        if self.input_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::invalid("layer dimensions must be non-zero"));
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return Err(Error::invalid("init_scale must be finite and non-negative"));
        }
        Ok(())
    }
}

/// One affine layer followed by its activation. `weight` is `out x in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
    pub activation: Activation,
}

impl<T: Scalar> Layer<T> {
    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Gradient of a loss with respect to one layer's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

/// Parameter gradient for a whole network, layer-aligned with [`Mlp`].
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrad<T> {
    pub layers: Vec<LayerGrad<T>>,
}

impl<T: Scalar> MlpGrad<T> {
    /// Tensor views in the canonical order: per layer, weight then bias.
    pub fn slices(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn to_flat(&self) -> Vec<T> {
        self.slices().concat()
    }

    pub fn max_abs(&self) -> T {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }
}

/// Cached activations of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    /// `activations[0]` is the input; `activations[k+1]` the output of layer `k`.
    pub activations: Vec<Matrix<T>>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn output(&self) -> &Matrix<T> {
        self.activations.last().expect("trace holds at least the input")
    }
}

/// Multilayer perceptron parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    layers: Vec<Layer<T>>,
}

impl<T: Scalar> Mlp<T> {
    /// Random initialization: weights uniform in `±init_scale/sqrt(fan_in)`,
    /// biases zero, hidden layers ReLU, output tanh.
    pub fn init(spec: &NetSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
        let mut dims = Vec::with_capacity(spec.hidden_dims.len() + 2);
        dims.push(spec.input_dim);
        dims.extend_from_slice(&spec.hidden_dims);
        dims.push(spec.code_bits);
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = spec.init_scale / (fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| {
                        let u: f64 = rng.random_range(-1.0..=1.0);
                        T::lit(u * bound)
                    })
                    .collect();
                Layer {
                    weight: Matrix::new(fan_out, fan_in, data).expect("finite init"),
                    bias: vec![T::zero(); fan_out],
                    activation: if k == last {
                        Activation::Tanh
                    } else {
                        Activation::Relu
                    },
                }
            })
            .collect();
        Ok(Self { layers })
    }

    /// Assembles a network from explicit layers, checking that dimensions
    /// chain and the output layer is tanh.
    pub fn from_layers(layers: Vec<Layer<T>>) -> Result<Self> {
        let last = layers
            .last()
            .ok_or_else(|| Error::invalid("network needs at least one layer"))?;
        if last.activation != Activation::Tanh {
            return Err(Error::invalid("output layer activation must be tanh"));
        }
        for (k, l) in layers.iter().enumerate() {
            if l.out_dim() == 0 || l.in_dim() == 0 {
                return Err(Error::invalid(format!("layer {k} has a zero dimension")));
            }
            if l.bias.len() != l.out_dim() {
                return Err(Error::invalid(format!(
                    "layer {k}: bias length {} != out dim {}",
                    l.bias.len(),
                    l.out_dim()
                )));
            }
            if l.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::Numeric(format!("layer {k}: non-finite bias")));
            }
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::invalid(format!(
                    "layer {k} out dim {} does not feed layer {} in dim {}",
                    pair[0].out_dim(),
                    k + 1,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn code_bits(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.as_slice().len() + l.bias.len()).sum()
    }

    /// Relaxed codes in `(-1, 1)`, one row per input row.
    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let mut a = self.check_input(x)?.clone();
        for layer in &self.layers {
            a = affine_activate(layer, &a)?;
        }
        Ok(a)
    }

    pub fn forward_trace(&self, x: &Matrix<T>) -> Result<ForwardTrace<T>> {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(self.check_input(x)?.clone());
        for layer in &self.layers {
            let next = affine_activate(layer, activations.last().unwrap())?;
            activations.push(next);
        }
        Ok(ForwardTrace { activations })
    }

    /// Back-propagates `upstream = dL/d(output)` to the parameters.
    pub fn backward(&self, x: &Matrix<T>, upstream: &Matrix<T>) -> Result<MlpGrad<T>> {
        let trace = self.forward_trace(x)?;
        self.backward_trace(&trace, upstream)
    }

    pub fn backward_trace(&self, trace: &ForwardTrace<T>, upstream: &Matrix<T>) -> Result<MlpGrad<T>> {
        if trace.activations.len() != self.layers.len() + 1 {
            return Err(Error::invalid("trace does not belong to this network"));
        }
        if upstream.shape() != trace.output().shape() {
            return Err(Error::invalid(format!(
                "upstream gradient shape {:?} != output shape {:?}",
                upstream.shape(),
                trace.output().shape()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut d_out = upstream.clone();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let out = &trace.activations[k + 1];
            let input = &trace.activations[k];
            let mut delta = d_out;
            for (d, &a) in delta.as_mut_slice().iter_mut().zip(out.as_slice()) {
                *d *= layer.activation.derivative_from_output(a);
            }
            let weight = matmul(&delta.transpose(), input)?;
            let mut bias = vec![T::zero(); layer.out_dim()];
            for i in 0..delta.rows() {
                for (b, &d) in bias.iter_mut().zip(delta.row(i)) {
                    *b += d;
                }
            }
            if k > 0 {
                d_out = matmul(&delta, &layer.weight)?;
            } else {
                d_out = Matrix::zeros(0, 0);
            }
            grads.push(LayerGrad { weight, bias });
        }
        grads.reverse();
        Ok(MlpGrad { layers: grads })
    }

    /// Mutable tensor views in the order of [`MlpGrad::slices`].
    pub fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn to_flat(&self) -> Vec<T> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.as_slice().iter().chain(&l.bias).copied())
            .collect()
    }

    /// Same architecture with parameters taken from a flat vector.
    pub fn with_flat(&self, flat: &[T]) -> Result<Self> {
        if flat.len() != self.num_params() {
            return Err(Error::invalid(format!(
                "flat parameter length {} != {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut out = self.clone();
        let mut pos = 0;
        for s in out.param_slices_mut() {
            s.copy_from_slice(&flat[pos..pos + s.len()]);
            pos += s.len();
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    /// Serializes to the model file layout (f64 payload regardless of `T`).
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        put_u16(&mut out, MODEL_VERSION);
        let count = u16::try_from(self.layers.len())
            .map_err(|_| Error::invalid("too many layers for model file"))?;
        put_u16(&mut out, count);
        for l in &self.layers {
            put_u32(&mut out, to_u32(l.out_dim(), "layer out dim")?);
            put_u32(&mut out, to_u32(l.in_dim(), "layer in dim")?);
            out.push(l.activation.tag());
            for &w in l.weight.as_slice().iter().chain(&l.bias) {
                out.extend_from_slice(&w.to_f64_lossy().to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(buf);
        r.expect_magic(MODEL_MAGIC)?;
        let at = r.offset();
        let version = r.u16("version")?;
        if version != MODEL_VERSION {
            return Err(Error::format(at, format!("unsupported model version {version}")));
        }
        let count = r.u16("layer count")? as usize;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let out_dim = r.u32("layer out dim")? as usize;
            let in_dim = r.u32("layer in dim")? as usize;
            let tag_at = r.offset();
            let activation = Activation::from_tag(r.u8("activation tag")?, tag_at)?;
            let need = out_dim
                .checked_mul(in_dim)
                .and_then(|w| w.checked_add(out_dim))
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| Error::format(r.offset(), "layer size overflows"))?;
            if r.remaining() < need {
                // Report the shortfall before allocating.
                r.take(need, "layer parameters")?;
            }
            let mut weights = Vec::with_capacity(out_dim * in_dim);
            for _ in 0..out_dim * in_dim {
                weights.push(T::lit(r.f64("weight")?));
            }
            let mut bias = Vec::with_capacity(out_dim);
            for _ in 0..out_dim {
                bias.push(T::lit(r.f64("bias")?));
            }
            layers.push(Layer {
                weight: Matrix::new(out_dim, in_dim, weights)?,
                bias,
                activation,
            });
        }
        r.finish()?;
        Self::from_layers(layers)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    fn check_input<'a>(&self, x: &'a Matrix<T>) -> Result<&'a Matrix<T>> {
        if x.cols() != self.input_dim() {
            return Err(Error::invalid(format!(
                "input has {} features, network expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        Ok(x)
    }
}

fn affine_activate<T: Scalar>(layer: &Layer<T>, input: &Matrix<T>) -> Result<Matrix<T>> {
    let mut z = matmul(input, &layer.weight.transpose())?;
    for i in 0..z.rows() {
        for (v, &b) in z.row_mut(i).iter_mut().zip(&layer.bias) {
            *v = layer.activation.apply(*v + b);
        }
    }
    if !z.is_finite() {
        return Err(Error::Numeric("layer output is not finite".into()));
    }
    Ok(z)
}

/// Binarization convention used everywhere: `+1` for `v >= 0`, else `-1`.
#[inline]
pub fn sign_code<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one()
    } else {
        -T::one()
    }
}

/// Entry-wise [`sign_code`].
pub fn binarize<T: Scalar>(codes: &Matrix<T>) -> Matrix<T> {
    codes.map(sign_code)
}
